"""Scenario drivers: seeding, topology events and the frame loop."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .boundary import BoundaryModel, DeformableBody, FixedBody, RigidBody
from .diagram import SITE_STRIDE, PolygonDomain, build_restricted_diagram
from .energy import EnergyModel, EnergyTerm
from .solve import History, SolverConfig, SolverFailure, step
from .system import COMPONENTS, SystemState

log = logging.getLogger(__name__)

TILING_RTOL = 1e-9


class SimulationFailure(RuntimeError):
    def __init__(self, frame, message):
        super().__init__(f"frame {frame}: {message}")
        self.frame = frame


# ---------------------------------------------------------------- geometry


def contains(domain: PolygonDomain, pts) -> np.ndarray:
    """Even-odd point membership over all loops of the domain."""
    pts = np.atleast_2d(pts)
    inside = np.zeros(len(pts), bool)
    v = domain.vertices
    for loop in domain.loops:
        a = v[np.asarray(loop)]
        b = np.roll(a, -1, axis=0)
        for (ax, ay), (bx, by) in zip(a, b):
            cond = (ay > pts[:, 1]) != (by > pts[:, 1])
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = ax + (pts[:, 1] - ay) * (bx - ax) / (by - ay)
            inside ^= cond & (pts[:, 0] < xint)
    return inside


def circle_polygon(cx, cy, r, m):
    t = 2 * np.pi * np.arange(m) / m
    return np.c_[cx + r * np.cos(t), cy + r * np.sin(t)]


def build_domain(dc: dict):
    """Domain polygon plus the loop index of the hole (or None)."""
    if dc["shape"] == "rectangle":
        x0, y0, w, h = dc["x0"], dc["y0"], dc["width"], dc["height"]
        outer = np.array([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]], float)
    elif dc["shape"] == "circle":
        outer = circle_polygon(dc["x0"], dc["y0"], dc["radius"], dc["segments"])
    elif dc["shape"] == "polygon":
        outer = np.array(cfgmod.points(dc["outline"]), float)
        if len(outer) < 3:
            raise cfgmod.ConfigError("domain.outline needs at least three points")
    else:
        raise cfgmod.ConfigError(f"unknown domain.shape {dc['shape']!r}")
    verts = [outer]
    loops = [list(range(len(outer)))]
    hole_loop = None
    if dc["hole"]:
        hole = np.array(cfgmod.points(dc["hole"]), float)
        loops.append(list(range(len(outer), len(outer) + len(hole))))
        verts.append(hole)
        hole_loop = 1
    return PolygonDomain(np.concatenate(verts), loops), hole_loop


def build_boundary(cfg: dict):
    dc = cfg["domain"]
    domain, hole = build_domain(dc)
    bodies = []
    if dc["outer_mode"] == "deformable":
        free = None
        if dc["free_vertices"]:
            free = np.zeros(len(domain.vertices), bool)
            idx = [int(v) for v in cfgmod.vector(dc["free_vertices"])]
            if any(not 0 <= i < len(domain.loops[0]) for i in idx):
                raise cfgmod.ConfigError("domain.free_vertices must index the outer loop")
            free[np.asarray(domain.loops[0])[idx]] = True
        bodies.append(DeformableBody((0,), stiffness=dc["stiffness"], viscosity=dc["membrane_viscosity"], free=free))
    elif dc["outer_mode"] != "fixed":
        raise cfgmod.ConfigError(f"unknown domain.outer_mode {dc['outer_mode']!r}")
    if hole is not None:
        mode = dc["hole_mode"]
        if mode == "rigid":
            rc = cfg["rigid"]
            bodies.append(RigidBody(
                (hole,),
                force=(rc["force_x"], rc["force_y"]),
                torque=rc["torque"],
                mass=tuple(cfgmod.vector(rc["mass"], 3)),
                viscosity=tuple(cfgmod.vector(rc["viscosity"], 3)),
                second_order=rc["second_order"],
            ))
        elif mode == "deformable":
            bodies.append(DeformableBody((hole,), stiffness=dc["stiffness"], viscosity=dc["membrane_viscosity"]))
        elif mode != "fixed":
            raise cfgmod.ConfigError(f"unknown domain.hole_mode {mode!r}")
    return BoundaryModel(domain, bodies)


def build_energy(ec: dict) -> EnergyModel:
    terms = []
    for kind in ("area_target", "relative_area", "perimeter", "perimeter_quadratic", "second_moment",
                 "site_centroid", "site_moment", "gravity"):
        a = ec[kind]
        if a:
            e = ec.get(f"{kind}_exponent", 0.0)
            terms.append(EnergyTerm(kind, a, e))
    return EnergyModel(terms, (1.0, ec["boundary_perimeter_weight"]))


# ----------------------------------------------------------------- seeding


def _bbox(domain):
    return domain.vertices.min(axis=0), domain.vertices.max(axis=0)


def sample_points(domain, n, rng, margin=0.0):
    lo, hi = _bbox(domain)
    out = np.zeros((0, 2))
    while len(out) < n:
        cand = rng.uniform(lo + margin, hi - margin, size=(4 * n + 16, 2))
        out = np.concatenate([out, cand[contains(domain, cand)]])
    return out[:n]


def lloyd(domain, pts, iters):
    pts = np.array(pts, float)
    w = np.zeros(len(pts))
    for _ in range(iters):
        d = build_restricted_diagram(pts, w, domain)
        from .measures import MeasureSet

        ms = MeasureSet(d, order=0)
        pts = ms.centroids()
    return pts


def seed_sites(cfg: dict, domain, rng) -> np.ndarray:
    sc = cfg["sites"]
    n = sc["count"]
    mode = sc["seeding"]
    if mode == "explicit":
        pts = np.array(cfgmod.points(sc["positions"]), float)
        if len(pts) != n:
            raise cfgmod.ConfigError(f"sites.positions lists {len(pts)} points but sites.count={n}")
    elif mode == "grid":
        lo, hi = _bbox(domain)
        k = int(np.ceil(np.sqrt(n * (hi - lo)[0] / (hi - lo)[1])))
        rows = int(np.ceil(n / k))
        gx = lo[0] + (np.arange(k) + 0.5) * (hi - lo)[0] / k
        gy = lo[1] + (np.arange(rows) + 0.5) * (hi - lo)[1] / rows
        pts = np.array([(x, y) for y in gy for x in gx])[:n]
    elif mode in ("random", "lloyd"):
        pts = sample_points(domain, n, rng, sc["margin"])
        if mode == "lloyd":
            pts = lloyd(domain, pts, sc["lloyd_iters"])
    elif mode == "mirrored":
        # reflection-symmetric about y = 0; needs an even count
        if n % 2:
            raise cfgmod.ConfigError("mirrored seeding needs an even site count")
        half = np.zeros((0, 2))
        while len(half) < n // 2:
            p = sample_points(domain, n, rng, sc["margin"])
            p = p[(p[:, 1] > 1e-3) & contains(domain, p * [1, -1])]
            half = np.concatenate([half, p])
        half = half[: n // 2]
        pts = np.concatenate([half, half * [1, -1]])
        w = np.zeros(n)
        from .measures import MeasureSet

        for _ in range(sc["lloyd_iters"]):
            c = MeasureSet(build_restricted_diagram(pts, w, domain), order=0).centroids()
            top = 0.5 * (c[: n // 2] + c[n // 2:] * [1, -1])
            top[:, 1] = np.maximum(top[:, 1], 1e-3)
            pts = np.concatenate([top, top * [1, -1]])
    else:
        raise cfgmod.ConfigError(f"unknown sites.seeding {mode!r}")
    return pts


def build_state(cfg: dict, rng):
    boundary = build_boundary(cfg)
    energy = build_energy(cfg["energy"])
    sc = cfg["sites"]
    n = sc["count"]
    if n < 1:
        raise cfgmod.ConfigError("sites.count must be at least 1")
    pts = seed_sites(cfg, boundary.domain, rng)
    at = sc["area_target"]
    if at <= 0:
        at = sc["area_factor"] * boundary.domain.area() / n
    params = np.c_[pts, np.full(n, sc["weight"]), np.full(n, at)]
    names = [t.strip() for t in sc["dofs"].split(",") if t.strip()]
    aliases = {"x": 0, "y": 1, "w": 2, "weight": 2, "area_target": 3, "target": 3}
    mask = np.zeros(SITE_STRIDE, bool)
    for nm in names:
        if nm not in aliases:
            raise cfgmod.ConfigError(f"unknown DOF name {nm!r} in sites.dofs")
        mask[aliases[nm]] = True
    mask = np.tile(mask, (n, 1))
    if sc["gauge_weight"]:
        # a uniform weight shift leaves the diagram unchanged
        mask[0, 2] = False
    state = SystemState(params, mask, boundary, energy,
                        mass=cfgmod.vector(sc["mass"], 4), viscosity=cfgmod.vector(sc["viscosity"], 4))
    vel = None
    if sc["velocities"]:
        v = np.array(cfgmod.points(sc["velocities"]), float)
        if len(v) != n:
            raise cfgmod.ConfigError("sites.velocities must list one vector per site")
        full = np.zeros((n, SITE_STRIDE))
        full[:, :2] = v
        vel = np.concatenate([full.ravel()[state.site_dofs], np.zeros(boundary.n_p)])
    return state, vel


def solver_config(cfg: dict) -> SolverConfig:
    s = dict(cfg["solver"])
    s.pop("time_step_rule")
    try:
        return SolverConfig(**s)
    except ValueError as exc:
        raise cfgmod.ConfigError(str(exc)) from None


# ------------------------------------------------------------------ events


@dataclass
class DivisionRule:
    mode: str = "scheduled"  # scheduled | probabilistic
    period: int = 10
    beta: float = 0.1
    alpha: float = 0.0
    gamma: float = 1.0
    tau: float = 0.0
    orthogonal_first: int = 2
    max_cells: int = 0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("division offset scale must be positive")
        if not 0.5 < self.gamma <= 1.0:
            raise ValueError("daughter growth factor must lie in (0.5, 1]")

    def probability(self, area_target, h):
        return float(np.clip(self.alpha * area_target * h, 0.0, 1.0))


def divide(row, normal, rule: DivisionRule):
    """Two daughter parameter rows from a parent row (x, y, w, area target)."""
    row = np.asarray(row, dtype=float)
    at = row[3]
    if not at > 0:
        raise ValueError("division needs a positive area target")
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    off = rule.beta * np.sqrt(at) * n
    a, b = row.copy(), row.copy()
    a[:2] += off
    b[:2] -= off
    a[3] = b[3] = 0.5 * at
    return a, b, off


def division_normal(generation, rule, rng):
    if generation < rule.orthogonal_first:
        return np.eye(2)[generation % 2]
    t = rng.uniform(0, 2 * np.pi)
    return np.array([np.cos(t), np.sin(t)])


def apply_divisions(state: SystemState, history: History, parents, rule, rng, generation, growth, t_now):
    """Replace each listed site row by two daughters; histories are shifted copies."""
    parents = list(parents)
    if not parents:
        return []
    keep = [i for i in range(state.n_sites) if i not in set(parents)]
    new_rows, new_ids, hist_rows, events = [], [], [[] for _ in history.entries], []
    next_id = int(state.ids.max()) + 1
    for i in parents:
        pid = int(state.ids[i])
        g = generation.get(pid, 0)
        n = division_normal(g, rule, rng)
        a, b, off = divide(state.params[i], n, rule)
        new_rows += [a, b]
        ids = [next_id, next_id + 1]
        next_id += 2
        new_ids += ids
        for j, (p, _) in enumerate(history.entries):
            for sgn in (1.0, -1.0):
                r = p[i].copy()
                r[:2] += sgn * off
                r[3] = 0.5 * r[3]
                hist_rows[j].append(r)
        for d in ids:
            generation[d] = g + 1
            if rule.tau > 0:
                growth[d] = (t_now, 0.5 * state.params[i, 3], rule.gamma * state.params[i, 3])
        events.append({"parent": pid, "daughters": ids, "area_target": float(state.params[i, 3]),
                       "daughter_area_targets": [float(a[3]), float(b[3])]})
    sel = np.asarray(parents)
    state.replace_sites(
        keep, np.array(new_rows), np.repeat(state.dof_mask[sel], 2, axis=0),
        np.repeat(state.mass[sel], 2, axis=0), np.repeat(state.viscosity[sel], 2, axis=0), new_ids,
    )
    history.remap(keep, hist_rows)
    return events


def collapse_sweep(state: SystemState, history: History | None, eps: float, areas=None):
    """Remove sites whose cell area is below ``eps`` times the domain area."""
    if areas is None:
        d, _, _ = state.diagram_at()
        areas = d.cell_areas()
    dom_area = state.boundary.domain_at(state.p).area()
    gone = np.flatnonzero(areas < eps * dom_area)
    if len(gone) == 0 or len(gone) == state.n_sites:
        return [], 0.0
    keep = np.setdiff1d(np.arange(state.n_sites), gone)
    removed_ids = [int(i) for i in state.ids[gone]]
    removed_area = float(np.nansum(state.params[gone, 3]))
    state.replace_sites(keep)
    if history is not None:
        history.remap(keep, None)
    return removed_ids, removed_area


# --------------------------------------------------------------- recording


def frame_record(state: SystemState, frame: int, t: float, result=None, diagram=None, extra=None) -> dict:
    if diagram is None:
        diagram, _, _ = state.diagram_at()
    from .measures import MeasureSet

    ms = MeasureSet(diagram, order=0, perimeter_weights=state.energy.perimeter_weights)
    cent = ms.centroids()
    cells = []
    for i in range(state.n_sites):
        cells.append({
            "id": int(state.ids[i]),
            "site": [float(v) for v in state.params[i, :2]],
            "weight": float(state.params[i, 2]),
            "area_target": None if not np.isfinite(state.params[i, 3]) else float(state.params[i, 3]),
            "area": float(ms.area[i]),
            "perimeter": float(ms.perimeter[i]),
            "centroid": [float(v) for v in cent[i]],
            "polygon": [[[float(a), float(b)] for a, b in loop] for loop in diagram.cell_polygons(i)],
        })
    dom = diagram.domain
    rec = {
        "schema_version": 1,
        "frame": frame,
        "time": float(t),
        "dofs": [float(v) for v in state.y],
        "layout": [[o, c] for o, c in state.layout()],
        "boundary": [[[float(a), float(b)] for a, b in dom.vertices[np.asarray(loop)]] for loop in dom.loops],
        "cells": cells,
        "tiling_error": float(abs(ms.area.sum() - dom.area()) / abs(dom.area())),
    }
    if result is not None:
        rec["solver"] = {
            "iterations": int(result.iterations),
            "converged": bool(result.converged),
            "stalled": bool(result.stalled),
            "grad_norm": float(result.grad_norm),
            "objective": float(result.value),
            "line_search_steps": int(result.line_search_steps),
        }
    if extra:
        rec.update(extra)
    return rec


@dataclass
class RunLog:
    name: str
    seed: int
    frames: list = field(default_factory=list)  # per-frame summary rows
    events: list = field(default_factory=list)
    failure: dict | None = None
    total_time: float = 0.0


# --------------------------------------------------------------- simulation


class Simulation:
    """Frame loop for one scenario config."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg["scenario"]["seed"])
        self.state, self.velocity = build_state(cfg, self.rng)
        self.solver = solver_config(cfg)
        self.history = History.start(self.state, self.solver, self.velocity)
        self.generation = {}
        self.growth = {}
        self.time = 0.0
        ev = cfg["events"]
        self.rule = None
        if ev["division"] != "none":
            self.rule = DivisionRule(ev["division"], ev["division_period"], ev["beta"], ev["alpha"], ev["gamma"],
                                     ev["tau"], ev["orthogonal_first"], ev["division_max_cells"])
        dc = cfg["domain"]
        self.rest0 = self.state.boundary.rest.copy()
        self.squeeze = dc["shape"] == "rectangle" and (dc["target_width"] > 0 or dc["target_height"] > 0)
        self.last_log = None

    def _terminate(self, y, ev):
        # a collapsing cell drives the step towards an empty cell, which is
        # only reached in the limit; end the frame once it is below threshold
        th = getattr(ev.inner, "theta", None)
        if th is None:
            return False
        thresh = self.cfg["events"]["collapse_eps"] * th.diagram.domain.area()
        return bool(np.any(th.measures.area < thresh))

    def _time_step(self):
        if self.cfg["solver"]["time_step_rule"] == "inverse_count":
            return 1.0 / self.state.n_sites
        return self.solver.time_step

    def _boundary_motion(self, frame):
        dc = self.cfg["domain"]
        s = frame / max(self.cfg["scenario"]["frames"], 1)
        w = dc["width"] + s * ((dc["target_width"] or dc["width"]) - dc["width"])
        h = dc["height"] + s * ((dc["target_height"] or dc["height"]) - dc["height"])
        origin = np.array([dc["x0"], dc["y0"]])
        scale = np.array([w / dc["width"], h / dc["height"]])
        self.state.boundary.rest = origin + (self.rest0 - origin) * scale
        self.state.boundary.domain = self.state.boundary.domain.with_vertices(self.state.boundary.rest)
        self.state._cache.clear()

    def _growth_update(self):
        if not self.growth or self.state.dof_mask[:, 3].any():
            return
        for i, sid in enumerate(self.state.ids):
            g = self.growth.get(int(sid))
            if g is None:
                continue
            t0, a0, a1 = g
            s = min(max((self.time - t0) / self.rule.tau, 0.0), 1.0)
            self.state.params[i, 3] = a0 + s * (a1 - a0)
        self.state._cache.clear()
        for j, (p, q) in enumerate(self.history.entries):
            p[:, 3] = self.state.params[:, 3]

    def _divisions(self, frame, h):
        rule = self.rule
        n = self.state.n_sites
        if rule.max_cells and n >= rule.max_cells:
            return []
        if rule.mode == "scheduled":
            if frame == 0 or frame % rule.period:
                return []
            parents = list(range(n))
            if rule.max_cells:
                parents = parents[: max(0, rule.max_cells - n)]
        else:
            u = self.rng.uniform(size=n)
            p = np.array([rule.probability(a, h) for a in self.state.params[:, 3]])
            parents = list(np.flatnonzero(u < p))
            if rule.max_cells:
                parents = parents[: max(0, rule.max_cells - n)]
        return apply_divisions(self.state, self.history, parents, rule, self.rng, self.generation, self.growth,
                               self.time)

    def run(self, on_frame=None) -> RunLog:
        cfg = self.cfg
        log_ = RunLog(cfg["scenario"]["name"], cfg["scenario"]["seed"])
        self.last_log = log_
        ev = cfg["events"]
        frames = cfg["scenario"]["frames"]
        t_start = time.perf_counter()
        rec = frame_record(self.state, 0, 0.0)
        if on_frame:
            on_frame(rec)
        log_.frames.append(self._summary(rec, 0.0, 0.0))
        for frame in range(1, frames + 1):
            t0 = time.perf_counter()
            h = self._time_step()
            events = []
            try:
                if self.rule is not None:
                    events = self._divisions(frame, h)
                    if events:
                        log_.events += [dict(e, frame=frame, kind="division") for e in events]
                if self.squeeze:
                    self._boundary_motion(frame)
                self._growth_update()
                scfg = dataclasses.replace(self.solver, time_step=h)
                res = step(self.state, self.history, scfg, self._terminate if ev["collapse"] else None)
                if res.line_search_failed or not (res.converged or res.stalled or res.terminated):
                    raise SimulationFailure(frame, f"solver did not converge (|g|={res.grad_norm:.3e}, "
                                            f"{res.iterations} iterations)")
            except (SolverFailure, ArithmeticError, ValueError) as exc:
                if isinstance(exc, SimulationFailure):
                    err = exc
                else:
                    err = SimulationFailure(frame, str(exc))
                log_.failure = {"frame": frame, "message": str(err)}
                log_.total_time = time.perf_counter() - t_start
                raise err from exc
            self.time += h
            solve_time = time.perf_counter() - t0
            diagram, _, _ = self.state.diagram_at()
            removed = []
            if ev["collapse"]:
                removed, area = collapse_sweep(self.state, self.history, ev["collapse_eps"], diagram.cell_areas())
                if removed:
                    log_.events.append({"frame": frame, "kind": "collapse", "removed": removed,
                                        "removed_area_target": area})
                    diagram, _, _ = self.state.diagram_at()
            rec = frame_record(self.state, frame, self.time, res, diagram)
            if on_frame and (frame % cfg["output"]["every"] == 0 or frame == frames):
                on_frame(rec)
            log_.frames.append(self._summary(rec, solve_time, time.perf_counter() - t0))
            if ev["stop_cells"] and self.state.n_sites <= ev["stop_cells"]:
                break
        log_.total_time = time.perf_counter() - t_start
        return log_

    def _summary(self, rec, solve_time, frame_time):
        s = rec.get("solver", {})
        return {
            "frame": rec["frame"],
            "time": rec["time"],
            "cells": len(rec["cells"]),
            "iterations": s.get("iterations", 0),
            "converged": s.get("converged", True),
            "objective": s.get("objective", float("nan")),
            "grad_norm": s.get("grad_norm", 0.0),
            "tiling_error": rec["tiling_error"],
            "total_area_target": float(np.nansum([c["area_target"] or np.nan for c in rec["cells"]])),
            "solve_seconds": solve_time,
            "frame_seconds": frame_time,
        }


def run(cfg: dict, on_frame=None) -> RunLog:
    return Simulation(cfg).run(on_frame)


# -------------------------------------------------------------- convergence


@dataclass
class ConvergenceResult:
    time_steps: list
    errors: list
    slope: float
    reference_step: float
    topology_changes: int
    rows: list = field(default_factory=list)


def final_state(cfg: dict, h: float, watch_topology: bool = False):
    c = cfgmod.merge(cfg, {})
    c["solver"]["time_step"] = h
    sim = Simulation(c)
    steps = int(round(c["convergence"]["total_time"] / h))
    sig = None
    changes = 0
    scfg = sim.solver
    for k in range(steps):
        res = step(sim.state, sim.history, scfg)
        if res.line_search_failed or not (res.converged or res.stalled):
            raise SimulationFailure(k + 1, "solver did not converge in convergence run")
        if watch_topology:
            s = sim.state.diagram_at()[0].topology_signature()
            if sig is not None and s != sig:
                changes += 1
            sig = s
    return sim.state.y, changes


def convergence_study(cfg: dict) -> ConvergenceResult:
    """Final-state error against a fine reference over halving time steps."""
    cc = cfg["convergence"]
    h0 = cc["h0"]
    hs = [h0 / 2**j for j in range(cc["halvings"] + 1)]
    h_ref = h0 / 2 ** cc["reference_halvings"]
    y_ref, changes = final_state(cfg, h_ref, watch_topology=True)
    errs = []
    rows = []
    for h in hs:
        y, _ = final_state(cfg, h)
        e = float(np.abs(y - y_ref).max())
        errs.append(e)
        rows.append({"time_step": h, "error": e})
    slope = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    return ConvergenceResult(hs, errs, slope, h_ref, changes, rows)
