"""Output artifacts: JSON with fixed float precision, CSV tables and PNG plots."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np


def _emit(obj, out: list, indent: int | None, level: int):
    if obj is None or obj is True or obj is False:
        out.append("null" if obj is None else ("true" if obj else "false"))
    elif isinstance(obj, (int, np.integer)) and not isinstance(obj, bool):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        # JSON has no inf/nan; null keeps the file readable everywhere
        out.append(_float(x) if math.isfinite(x) else "null")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
        out.append("{")
        for k, (key, val) in enumerate(obj.items()):
            if k:
                out.append("," if indent is not None else ", ")
            out.append(pad + json.dumps(str(key)) + ": ")
            _emit(val, out, indent, level + 1)
        out.append(("" if indent is None else "\n" + " " * (indent * level)) + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        out.append("[")
        for k, val in enumerate(seq):
            if k:
                out.append(", ")
            _emit(val, out, None if _flat(val) else indent, level + 1)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def _float(x: float) -> str:
    t = format(x, ".17g")
    # keep floats recognizable as floats on reload
    return t if any(ch in t for ch in ".en") else t + ".0"


def _flat(v) -> bool:
    return not isinstance(v, dict)


def dumps(obj, indent: int | None = 1) -> str:
    """JSON text with every float written to 17 significant digits."""
    out = []
    _emit(obj, out, indent, 0)
    return "".join(out)


def write_json(path, obj, indent: int | None = 1) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj, indent) + "\n")
    return path


def write_csv(path, rows: list, columns=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])
    return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return _float(float(v))
    if isinstance(v, bool):
        return int(v)
    return "" if v is None else v


def _figure(ncols=1, width=6.0, height=3.6):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)
    for ax in axes.ravel():
        ax.grid(True, alpha=0.3)
        for side in ("top", "right"):
            ax.spines[side].set_visible(False)
    return fig, axes.ravel()


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # a fixed metadata block keeps repeated runs byte-identical
    fig.savefig(path, dpi=120, metadata={"Software": None})
    import matplotlib.pyplot as plt

    plt.close(fig)
    return path


def plot_run(rows: list, path) -> Path:
    """Cell count and Newton iterations per frame."""
    fig, (a, b) = _figure(2)
    f = [r["frame"] for r in rows]
    a.step(f, [r["cells"] for r in rows], where="post", color="C0")
    a.set_xlabel("frame")
    a.set_ylabel("cells")
    b.plot(f[1:], [r["iterations"] for r in rows[1:]], ".-", color="C1", ms=3)
    b.set_xlabel("frame")
    b.set_ylabel("Newton iterations")
    return _save(fig, path)


def plot_convergence(time_steps, errors, slope, path, label="") -> Path:
    fig, (a,) = _figure(1, 5.0, 4.0)
    h, e = np.asarray(time_steps), np.asarray(errors)
    a.loglog(h, e, "o-", label=f"{label} slope {slope:.2f}".strip())
    ref = e[0] * (h / h[0]) ** round(slope)
    a.loglog(h, ref, "k--", lw=0.8, label=f"order {round(slope)}")
    a.set_xlabel("time step h")
    a.set_ylabel("final-state error")
    a.legend(frameon=False)
    return _save(fig, path)


def plot_bench(sizes, seconds, path) -> Path:
    fig, (a,) = _figure(1, 5.0, 4.0)
    n, t = np.asarray(sizes, float), np.asarray(seconds, float)
    a.loglog(n, t, "o-", label="diagram + Hessian")
    a.loglog(n, t[0] * n / n[0], "k--", lw=0.8, label="linear")
    a.set_xlabel("sites")
    a.set_ylabel("seconds")
    a.legend(frameon=False)
    return _save(fig, path)
