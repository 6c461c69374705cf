"""Deterministic SVG drawings of frame records.

Cells are filled polygons, boundary loops are stroked and sites are dots.
Colors come either from a hash of the persistent cell id or from a scalar
field mapped through a fixed colormap. Coordinates are written with a fixed
number of decimals so identical frames give identical bytes.
"""

from __future__ import annotations

import colorsys
import hashlib
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
FIELDS = ("id", "area_error", "pressure")


class FrameSchemaError(ValueError):
    def __init__(self, index, message):
        super().__init__(f"frame {index}: {message}")
        self.index = index


def id_color(cell_id: int) -> str:
    h = hashlib.sha256(str(int(cell_id)).encode()).digest()
    hue = h[0] / 255.0
    sat = 0.45 + 0.3 * h[1] / 255.0
    val = 0.75 + 0.2 * h[2] / 255.0
    r, g, b = colorsys.hsv_to_rgb(hue, sat, val)
    return f"#{round(255 * r):02x}{round(255 * g):02x}{round(255 * b):02x}"


def scalar_field(frame: dict, name: str, area_coefficient: float = 1.0) -> np.ndarray:
    """Per-cell values of ``name``.

    ``area_error`` is A / At - 1. ``pressure`` is the pressure analog
    2 a (1 - A / At) / At with ``a`` the area-term coefficient.
    """
    a = np.array([c["area"] for c in frame["cells"]], float)
    t = np.array([np.nan if c["area_target"] is None else c["area_target"] for c in frame["cells"]], float)
    if name == "area_error":
        return a / t - 1.0
    if name == "pressure":
        return 2.0 * area_coefficient * (1.0 - a / t) / t
    raise ValueError(f"unknown field {name!r}; choose from {', '.join(FIELDS[1:])}")


def _field_colors(values):
    from matplotlib import colormaps

    cmap = colormaps["coolwarm"]
    v = np.asarray(values, float)
    finite = v[np.isfinite(v)]
    span = float(np.abs(finite).max()) if finite.size else 0.0
    span = span if span > 0 else 1.0
    out = []
    for x in v:
        if not np.isfinite(x):
            out.append("#bbbbbb")
            continue
        r, g, b, _ = cmap(0.5 + 0.5 * x / span)
        out.append(f"#{round(255 * r):02x}{round(255 * g):02x}{round(255 * b):02x}")
    return out


def validate_frame(frame: dict, index: int = 0) -> None:
    if not isinstance(frame, dict):
        raise FrameSchemaError(index, "not a JSON object")
    if frame.get("schema_version") != SCHEMA_VERSION:
        raise FrameSchemaError(index, f"schema_version {frame.get('schema_version')!r} != {SCHEMA_VERSION}")
    for key in ("cells", "boundary"):
        if key not in frame:
            raise FrameSchemaError(index, f"missing {key!r}")
    for c in frame["cells"]:
        for key in ("id", "polygon", "site", "area"):
            if key not in c:
                raise FrameSchemaError(index, f"cell without {key!r}")


def frame_svg(frame: dict, color_by: str = "id", size: int = 512, area_coefficient: float = 1.0,
              decimals: int = 3, index: int = 0) -> str:
    """SVG text for one frame record."""
    validate_frame(frame, index)
    if color_by not in FIELDS:
        raise ValueError(f"unknown color field {color_by!r}; choose from {', '.join(FIELDS)}")
    pts = [np.asarray(lp, float) for lp in frame["boundary"] if len(lp)]
    allp = np.concatenate(pts) if pts else np.zeros((1, 2))
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    ext = float(max((hi - lo).max(), 1e-12))
    pad = 0.04 * ext
    s = (size - 2) / (ext + 2 * pad)
    width = round((hi[0] - lo[0] + 2 * pad) * s) + 2
    height = round((hi[1] - lo[1] + 2 * pad) * s) + 2

    def xy(p):
        # y axis points up in model space
        return (p[0] - lo[0] + pad) * s + 1, (hi[1] + pad - p[1]) * s + 1

    fmt = f"{{:.{decimals}f}}"

    def path(loops):
        parts = []
        for lp in loops:
            if len(lp) < 3:
                continue
            coords = [xy(p) for p in lp]
            parts.append("M" + " L".join(f"{fmt.format(a)},{fmt.format(b)}" for a, b in coords) + " Z")
        return " ".join(parts)

    if color_by == "id":
        colors = [id_color(c["id"]) for c in frame["cells"]]
    else:
        colors = _field_colors(scalar_field(frame, color_by, area_coefficient))
    r = max(1.5, size / 300)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
        '<g stroke="#202020" stroke-width="0.8" stroke-linejoin="round" fill-rule="evenodd">',
    ]
    for c, col in zip(frame["cells"], colors):
        d = path(c["polygon"])
        if d:
            lines.append(f'<path data-id="{int(c["id"])}" fill="{col}" d="{d}"/>')
    lines.append("</g>")
    lines.append(f'<path fill="none" stroke="#000000" stroke-width="2" fill-rule="evenodd" d="{path(frame["boundary"])}"/>')
    lines.append('<g fill="#000000">')
    for c in frame["cells"]:
        a, b = xy(c["site"])
        lines.append(f'<circle cx="{fmt.format(a)}" cy="{fmt.format(b)}" r="{fmt.format(r)}"/>')
    lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_dir(frames_dir, out_dir=None, color_by: str = "id", size: int = 512, area_coefficient: float = 1.0) -> list:
    """Render every ``NNNN.json`` frame in ``frames_dir`` to a sibling SVG."""
    import json

    frames_dir = Path(frames_dir)
    out_dir = frames_dir if out_dir is None else Path(out_dir)
    files = sorted(p for p in frames_dir.glob("*.json") if p.stem.isdigit())
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for f in files:
        k = int(f.stem)
        try:
            frame = json.loads(f.read_text())
        except json.JSONDecodeError as exc:
            raise FrameSchemaError(k, f"{f.name}: invalid JSON ({exc})") from None
        svg = frame_svg(frame, color_by, size, area_coefficient, index=k)
        target = out_dir / f"{f.stem}.svg"
        target.write_text(svg)
        written.append(target)
    return written
