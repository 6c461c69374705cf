"""Scenario configuration: INI or JSON with a fixed schema.

Every section and key is declared in :data:`SCHEMA` together with its
default; the default's type decides how text values are parsed. Unknown
sections or keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import copy
import json
from pathlib import Path

PRESET_DIR = Path(__file__).with_name("presets")


class ConfigError(ValueError):
    pass


SCHEMA = {
    "scenario": {
        "name": "unnamed",
        "kind": "simulate",  # simulate | convergence
        "frames": 1,
        "seed": 0,
    },
    "domain": {
        "shape": "rectangle",  # rectangle | polygon | circle
        "x0": 0.0,
        "y0": 0.0,
        "width": 1.0,
        "height": 1.0,
        "outline": "",  # "x,y; x,y; ..." for shape=polygon
        "radius": 1.0,
        "segments": 32,
        "outer_mode": "fixed",  # fixed | deformable
        "free_vertices": "",  # outer-loop vertex indices left free when deformable; empty = all
        "stiffness": 0.0,
        "membrane_viscosity": 0.0,
        "hole": "",  # "x,y; x,y; ..." listed clockwise
        "hole_mode": "fixed",  # fixed | rigid | deformable
        "target_width": 0.0,  # prescribed motion of a fixed rectangle
        "target_height": 0.0,
    },
    "rigid": {
        "force_x": 0.0,
        "force_y": 0.0,
        "torque": 0.0,
        "mass": "0, 0, 0",
        "viscosity": "1, 1, 1",
        "second_order": True,
    },
    "sites": {
        "count": 1,
        "seeding": "random",  # random | grid | lloyd | explicit | mirrored
        "positions": "",
        "lloyd_iters": 30,
        "margin": 0.0,
        "weight": 0.0,
        "area_target": 0.0,  # <= 0: area_factor * domain area / count
        "area_factor": 1.0,
        "dofs": "x, y",
        "gauge_weight": False,  # hold site 0's weight fixed when weights are DOFs
        "mass": "0, 0, 0, 0",
        "viscosity": "0, 0, 0, 0",
        "velocities": "",  # "vx,vy; ..." initial site velocities
    },
    "energy": {
        "area_target": 0.0,
        "relative_area": 0.0,
        "perimeter": 0.0,
        "perimeter_quadratic": 0.0,
        "second_moment": 0.0,
        "second_moment_exponent": 0.0,
        "site_centroid": 0.0,
        "site_centroid_exponent": 0.0,
        "site_moment": 0.0,
        "gravity": 0.0,
        "boundary_perimeter_weight": 1.0,
    },
    "solver": {
        "scheme": "quasistatic",
        "time_step": 0.01,
        "time_step_rule": "fixed",  # fixed | inverse_count
        "grad_tol": 1e-8,
        "max_iters": 100,
        "ls_shrink": 0.5,
        "ls_armijo": 1e-4,
        "ls_max": 40,
        "reg_init": 1e-8,
        "reg_growth": 10.0,
        "acceleration": "backward",
        "startup": "consistent",
        "warm_start": True,
    },
    "events": {
        "collapse": False,
        "collapse_eps": 1e-9,
        "stop_cells": 0,
        "division": "none",  # none | scheduled | probabilistic
        "division_period": 10,
        "division_max_cells": 0,
        "beta": 0.1,
        "alpha": 0.0,
        "gamma": 1.0,
        "tau": 0.0,
        "orthogonal_first": 2,
    },
    "convergence": {
        "total_time": 1.0,
        "h0": 0.1,
        "halvings": 4,
        "reference_halvings": 7,
    },
    "output": {
        "svg": False,
        "every": 1,
        "diagram_dump": False,
    },
}


def _parse(default, text, where):
    if isinstance(default, bool):
        if isinstance(text, bool):
            return text
        s = str(text).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            v = float(text)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected an integer, got {text!r}") from None
        if v != int(v):
            raise ConfigError(f"{where}: expected an integer, got {text!r}")
        return int(v)
    if isinstance(default, float):
        try:
            return float(text)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {text!r}") from None
    if isinstance(text, (list, tuple)):
        return ", ".join(str(t) for t in text)
    return str(text)


def defaults() -> dict:
    return copy.deepcopy(SCHEMA)


def merge(base: dict, data: dict, origin: str = "config") -> dict:
    out = copy.deepcopy(base)
    for section, values in data.items():
        if section not in SCHEMA:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: section [{section}] must be a table")
        for key, text in values.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            out[section][key] = _parse(SCHEMA[section][key], text, f"{origin}: {section}.{key}")
    return out


def read_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    else:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        cp.optionxform = str
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        data = {s: dict(cp.items(s)) for s in cp.sections()}
    return merge(defaults(), data, str(path))


def preset_names() -> list:
    return sorted(p.stem for p in PRESET_DIR.glob("*.ini"))


def load(source: str | None = None, preset: str | None = None, overrides=()) -> dict:
    """Load a scenario from a file path or a shipped preset, then apply overrides."""
    if (source is None) == (preset is None):
        raise ConfigError("give exactly one of a scenario path or a preset name")
    if preset is not None:
        path = PRESET_DIR / f"{preset}.ini"
        if not path.is_file():
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(preset_names())}")
    else:
        path = Path(source)
    cfg = read_file(path)
    return apply_overrides(cfg, overrides)


def apply_overrides(cfg: dict, overrides) -> dict:
    data = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        if "." not in lhs:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        section, key = lhs.strip().split(".", 1)
        data.setdefault(section, {})[key] = value.strip()
    return merge(cfg, data, "override")


def vector(text: str, n: int | None = None) -> list:
    vals = [float(t) for t in str(text).replace(";", ",").split(",") if t.strip()]
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} numbers, got {text!r}")
    return vals


def points(text: str) -> list:
    out = []
    for chunk in str(text).split(";"):
        if chunk.strip():
            xy = [float(t) for t in chunk.split(",")]
            if len(xy) != 2:
                raise ConfigError(f"bad point {chunk!r}")
            out.append(xy)
    return out
