"""Equilibrium-constrained fitting with implicit sensitivities.

A :class:`FitProblem` holds a system whose DOFs ``y`` are found by energy
minimization while some fixed site parameters ``u`` (area targets by default)
are the optimization variables. The outer objective ``L`` is a function of
the full parameter vector ``theta(y, u)``; its total derivative follows from
the implicit function theorem,

    dL/du = L_u - lambda^T E_yu,    E_yy^T lambda = L_y^T,

or, in direct mode, from the full sensitivity matrix ``dy/du = -E_yy^-1 E_yu``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linear_sum_assignment

from .diagram import (
    SITE_STRIDE,
    DegenerateIntersection,
    DiagramError,
    GeneratorRecord,
    RestrictedDiagram,
    _key_spec,
    _segments_cross,
    vertex_kernel,
)
from .solve import SolverConfig, SolverFailure, minimize
from .system import SystemState

log = logging.getLogger(__name__)

ANNOTATION_SCHEMA = 1


class EquilibriumFailure(RuntimeError):
    pass


class SingularHessian(RuntimeError):
    def __init__(self, message, regularization):
        super().__init__(f"{message} (regularization reached {regularization:.3e})")
        self.regularization = regularization


class AnnotationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# annotations


@dataclass
class Annotation:
    """Hand-placed vertices and cell loops in image coordinates.

    Model coordinates are ``pixel * scale + offset``; ``scale`` may be a
    scalar or a per-axis pair (a negative y scale flips image rows).
    """

    vertices: dict
    cells: dict = field(default_factory=dict)
    scale: tuple = (1.0, 1.0)
    offset: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.vertices = {k: np.asarray(v, dtype=float) for k, v in self.vertices.items()}
        self.scale = np.broadcast_to(np.asarray(self.scale, dtype=float), (2,)).copy()
        self.offset = np.broadcast_to(np.asarray(self.offset, dtype=float), (2,)).copy()
        self.validate()

    def validate(self):
        for cid, loop in self.cells.items():
            missing = [v for v in loop if v not in self.vertices]
            if missing:
                raise AnnotationError(f"cell {cid} references unknown vertices {missing}")
            if len(set(loop)) != len(loop) or len(loop) < 3:
                raise AnnotationError(f"cell {cid} loop must list at least three distinct vertices")
            pts = [self.vertices[v] for v in loop]
            m = len(pts)
            for a in range(m):
                for b in range(a + 2, m):
                    if a == 0 and b == m - 1:
                        continue
                    if _segments_cross(pts[a], pts[(a + 1) % m], pts[b], pts[(b + 1) % m]):
                        raise AnnotationError(f"cell {cid} loop is not simple")

    @property
    def ids(self) -> list:
        return list(self.vertices)

    def model_points(self) -> np.ndarray:
        return np.array([self.vertices[k] * self.scale + self.offset for k in self.ids]).reshape(-1, 2)

    def to_json(self) -> dict:
        return {
            "schema_version": ANNOTATION_SCHEMA,
            "vertices": [{"id": k, "x": float(v[0]), "y": float(v[1])} for k, v in self.vertices.items()],
            "cells": [{"id": k, "loop": list(loop)} for k, loop in self.cells.items()],
            "scale": self.scale.tolist(),
            "offset": self.offset.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Annotation":
        try:
            version = data.get("schema_version", ANNOTATION_SCHEMA)
            if version != ANNOTATION_SCHEMA:
                raise AnnotationError(f"unsupported annotation schema_version {version}")
            verts = {}
            for v in data["vertices"]:
                if v["id"] in verts:
                    raise AnnotationError(f"duplicate vertex id {v['id']!r}")
                verts[v["id"]] = (float(v["x"]), float(v["y"]))
            cells = {c["id"]: list(c["loop"]) for c in data.get("cells", [])}
            return cls(verts, cells, data.get("scale", 1.0), data.get("offset", (0.0, 0.0)))
        except (KeyError, TypeError) as exc:
            raise AnnotationError(f"malformed annotation: {exc}") from None

    @classmethod
    def load(cls, path) -> "Annotation":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise AnnotationError(f"cannot read annotation {path}: {exc}") from None
        return cls.from_json(data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def annotation_from_diagram(diagram: RestrictedDiagram, interior_only: bool = True) -> Annotation:
    """Annotation of a diagram's own vertices (model units, identity mapping)."""
    keep = [v for v in range(diagram.n_vertices) if not interior_only or diagram.kinds[v] == 0]
    verts = {int(v): diagram.vertices[v] for v in keep}
    cells = {}
    for i, loops in enumerate(diagram.cells):
        if len(loops) == 1 and all(int(v) in verts for v in loops[0]):
            cells[i] = [int(v) for v in loops[0]]
    return Annotation(verts, cells)


# ---------------------------------------------------------------------------
# frozen correspondence and the vertex matching objective


@dataclass
class Correspondence:
    """Generator records frozen for each annotation vertex."""

    generators: list
    kinds: np.ndarray
    lines: np.ndarray
    distances: np.ndarray

    @classmethod
    def from_records(cls, records, domain=None) -> "Correspondence":
        kinds, lines = [], []
        for rec in records:
            key = _record_key(rec, domain)
            k, spec = _key_spec(key, domain)
            kinds.append(k)
            lines.append(spec)
        return cls(list(records), np.array(kinds, dtype=int), np.array(lines, dtype=int).reshape(-1, 2, 3),
                   np.zeros(len(records)))

    @classmethod
    def nearest(cls, diagram: RestrictedDiagram, points) -> "Correspondence":
        """Match points to distinct diagram vertices minimizing total distance."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(points) > diagram.n_vertices:
            raise AnnotationError(f"{len(points)} annotated vertices but the diagram has {diagram.n_vertices}")
        dist = np.linalg.norm(points[:, None, :] - diagram.vertices[None, :, :], axis=2)
        rows, cols = linear_sum_assignment(dist)
        order = np.argsort(rows)
        pick = cols[order]
        return cls(
            [diagram.generator(int(v)) for v in pick],
            diagram.kinds[pick].copy(),
            diagram.lines[pick].copy(),
            dist[rows[order], pick],
        )


def _record_key(rec: GeneratorRecord, domain):
    if rec.kind == "BB":
        return (0, *sorted(rec.site_ids))
    if rec.kind == "BE":
        i, j = sorted(rec.site_ids)
        return (1, i, j, rec.boundary_edge_ids[0])
    if domain is None:
        raise ValueError("boundary generator records need the domain")
    e1, e2 = rec.boundary_edge_ids
    site = rec.site_ids[0] if rec.site_ids else -1
    if domain.edge_end[e1] == domain.edge_start[e2]:
        return (2, int(domain.edge_start[e2]), site)
    if domain.edge_end[e2] == domain.edge_start[e1]:
        return (2, int(domain.edge_start[e1]), site)
    return (3, min(e1, e2), max(e1, e2), site)


@dataclass
class MatchValue:
    value: float
    grad: np.ndarray
    positions: np.ndarray


def generated_positions(correspondence: Correspondence, theta, n_sites: int, order: int = 0):
    """Closed-form positions of the frozen generators, whether or not they exist."""
    x, slots, jac, _ = vertex_kernel(correspondence.kinds, correspondence.lines, theta, n_sites,
                                     order=min(order, 1))
    return x, slots, jac


def image_match_objective(targets, correspondence: Correspondence, theta, n_sites: int) -> MatchValue:
    """Sum of squared distances between generated vertices and targets.

    Args:
        targets: (k, 2) model-space positions, or an :class:`Annotation`.
        theta: full parameter vector (site block then boundary vertices).

    Returns:
        value, gradient with respect to ``theta``, generated positions.

    Raises:
        DegenerateIntersection: a frozen generator has parallel lines.
    """
    if isinstance(targets, Annotation):
        targets = targets.model_points()
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    theta = np.asarray(theta, dtype=float)
    if len(targets) == 0:
        return MatchValue(0.0, np.zeros_like(theta), np.zeros((0, 2)))
    x, slots, jac = generated_positions(correspondence, theta, n_sites, order=1)
    r = x - targets
    grad = np.zeros_like(theta)
    contrib = 2.0 * np.einsum("vr,vrp->vp", r, jac)
    ok = slots >= 0
    np.add.at(grad, slots[ok], contrib[ok])
    return MatchValue(float(np.sum(r * r)), grad, x)


class VertexMatch:
    """Outer objective matching frozen diagram vertices to fixed targets."""

    def __init__(self, targets, correspondence: Correspondence):
        self.targets = np.asarray(targets, dtype=float).reshape(-1, 2)
        self.correspondence = correspondence

    def __call__(self, theta, n_sites):
        ev = image_match_objective(self.targets, self.correspondence, theta, n_sites)
        return ev.value, ev.grad


# ---------------------------------------------------------------------------
# the fit problem


_FIT_SOLVER = SolverConfig(grad_tol=1e-11, max_iters=200, plateau_window=0)


class FitProblem:
    """Outer parameters ``u`` over an equilibrium state.

    Args:
        state: system whose active DOFs are the equilibrium unknowns ``y``.
        objective: ``objective(theta, n_sites) -> (value, dvalue/dtheta)``.
        param_index: flat indices into ``state.params.ravel()`` set by ``u``;
            defaults to every site's area target.
        solver: inner Newton configuration.
    """

    def __init__(self, state: SystemState, objective, param_index=None, solver: SolverConfig | None = None):
        self.state = state
        self.objective = objective
        if param_index is None:
            param_index = SITE_STRIDE * np.arange(state.n_sites) + 3
        self.param_index = np.asarray(param_index, dtype=int)
        overlap = np.intersect1d(self.param_index, state.site_dofs)
        if len(overlap):
            raise ValueError("fit parameters must not be equilibrium DOFs")
        self.solver = solver or _FIT_SOLVER
        self.regularization = 0.0

    @property
    def n_params(self) -> int:
        return len(self.param_index)

    @property
    def u(self) -> np.ndarray:
        return self.state.params.ravel()[self.param_index].copy()

    def set_u(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {u.shape}")
        flat = self.state.params.ravel().copy()
        flat[self.param_index] = u
        self.state.params = flat.reshape(-1, SITE_STRIDE)
        self.state._cache.clear()

    def equilibrium(self, u, y0=None) -> np.ndarray:
        """Solve E_y(y, u) = 0 warm-started from ``y0``; the state keeps ``u`` and ``y*``."""
        self.set_u(u)
        y0 = self.state.y if y0 is None else np.asarray(y0, dtype=float)
        try:
            res = minimize(self.state.evaluate, y0, self.solver)
        except (SolverFailure, DiagramError) as exc:
            raise EquilibriumFailure(str(exc)) from None
        if not res.converged:
            raise EquilibriumFailure(f"equilibrium solve stopped at |g|={res.grad_norm:.3e}")
        self.state.set_y(res.y)
        return res.y

    def theta(self, y) -> np.ndarray:
        diagram, params, _ = self.state.diagram_at(y)
        return np.concatenate([params.ravel(), diagram.domain.vertices.ravel()])

    def loss(self, y):
        """L and its partials (L_y, L_u) at the current ``u``."""
        value, g_theta = self.objective(self.theta(y), self.state.n_sites)
        T = self.state.theta_map(self.state.params_at(y)[1])
        return value, T.T @ g_theta, g_theta[self.param_index]

    def second_derivatives(self, y):
        """(E_yy, E_yu) at the current ``u``."""
        ev = self.state.evaluate(y, 2)
        T = self.state.theta_map(self.state.params_at(y)[1])
        e_yu = (T.T @ ev.theta.hess.tocsc()[:, self.param_index]).tocsc()
        return ev.hess.tocsc(), e_yu


def _factor(H, cfg: SolverConfig):
    """LU of H, regularized with a growing multiple of the identity if singular."""
    n = H.shape[0]
    diag = np.abs(H.diagonal())
    scale = float(diag.mean()) if n and diag.mean() > 0 else 1.0
    lam = 0.0
    eye = sp.identity(n, format="csc")
    while True:
        try:
            lu = spla.splu((H + lam * eye).tocsc())
            probe = lu.solve(np.ones(n))
            if np.all(np.isfinite(probe)):
                return lu, lam
        except RuntimeError:
            pass
        lam = cfg.reg_init * scale if lam == 0.0 else lam * cfg.reg_growth
        if lam > cfg.reg_max * scale:
            raise SingularHessian("equilibrium Hessian cannot be factorized", lam)


def sensitivity_gradient(problem: FitProblem, y, u=None, mode: str = "adjoint") -> np.ndarray:
    """Total derivative dL/du at an equilibrium ``y``.

    ``mode='adjoint'`` solves one transposed system; ``mode='direct'`` forms
    the full dy/du matrix. Both agree to solver precision.
    """
    if u is not None:
        problem.set_u(u)
    y = np.asarray(y, dtype=float)
    _, l_y, l_u = problem.loss(y)
    if problem.state.n_dofs == 0:
        return l_u
    H, e_yu = problem.second_derivatives(y)
    if mode == "adjoint":
        lu, lam = _factor(H.T.tocsc(), problem.solver)
        problem.regularization = lam
        adj = lu.solve(l_y)
        return l_u - e_yu.T @ adj
    if mode == "direct":
        lu, lam = _factor(H, problem.solver)
        problem.regularization = lam
        dy_du = -lu.solve(e_yu.toarray())
        return l_u + l_y @ dy_du
    raise ValueError(f"unknown sensitivity mode {mode!r}")


def resolve_gradient_fd(problem: FitProblem, u, y_star, step: float = 1e-6) -> np.ndarray:
    """Central differences of L(y*(u), u) with a fresh equilibrium per sample."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(len(u))
    for k in range(len(u)):
        vals = []
        for s in (1.0, -1.0):
            du = u.copy()
            du[k] += s * step
            yk = problem.equilibrium(du, y_star)
            vals.append(problem.loss(yk)[0])
        out[k] = (vals[0] - vals[1]) / (2 * step)
    problem.equilibrium(u, y_star)
    return out


# ---------------------------------------------------------------------------
# L-BFGS outer loop


@dataclass
class FitConfig:
    memory: int = 10
    max_iters: int = 200
    grad_tol: float = 1e-12
    value_tol: float = 0.0
    ls_shrink: float = 0.5
    ls_armijo: float = 1e-4
    ls_max: int = 30
    first_step: float = 0.01  # initial step as a fraction of max |u|
    mode: str = "adjoint"


@dataclass
class FitResult:
    u: np.ndarray
    y: np.ndarray
    value: float
    initial_value: float
    iterations: int
    converged: bool
    reason: str
    history: list

    def report(self) -> dict:
        return {
            "schema_version": 1,
            "converged": self.converged,
            "reason": self.reason,
            "iterations": self.iterations,
            "initial_objective": self.initial_value,
            "final_objective": self.value,
            "u": self.u.tolist(),
            "history": self.history,
        }


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, yv, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * yv
    s, yv, _ = pairs[-1]
    q *= (s @ yv) / (yv @ yv)
    for (s, yv, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (yv @ q)
        q += (a - b) * s
    return -q


def fit(problem: FitProblem, u0, config: FitConfig | None = None, callback=None) -> FitResult:
    """Minimize L(y*(u), u) by L-BFGS with backtracking.

    Every trial ``u`` re-solves the equilibrium warm-started from the last
    accepted ``y*``; an equilibrium failure rejects the trial step.
    """
    cfg = config or FitConfig()
    u = np.asarray(u0, dtype=float).copy()
    y = problem.equilibrium(u)
    f = problem.loss(y)[0]
    g = sensitivity_gradient(problem, y, mode=cfg.mode)
    f0 = f
    pairs = []
    history = [{"iteration": 0, "objective": f, "grad_norm": float(np.abs(g).max()), "u": u.tolist()}]
    reason = "max_iters"
    for it in range(1, cfg.max_iters + 1):
        gn = float(np.abs(g).max())
        if gn <= cfg.grad_tol:
            reason = "grad_tol"
            break
        if f <= cfg.value_tol:
            reason = "value_tol"
            break
        d = _two_loop(g, pairs) if pairs else None
        if d is None or d @ g >= 0:
            pairs.clear()
            d = -g * (cfg.first_step * max(np.abs(u).max(), 1e-12) / gn)
        slope = float(d @ g)
        t = 1.0
        accepted = None
        for _ in range(cfg.ls_max + 1):
            trial = u + t * d
            try:
                yt = problem.equilibrium(trial, y)
                ft = problem.loss(yt)[0]
            except (EquilibriumFailure, DegenerateIntersection):
                ft = np.inf
            if np.isfinite(ft) and ft <= f + cfg.ls_armijo * t * slope:
                accepted = (trial, yt, ft)
                break
            t *= cfg.ls_shrink
        if accepted is None:
            problem.equilibrium(u, y)
            reason = "line_search"
            break
        u_new, y, f_new = accepted
        g_new = sensitivity_gradient(problem, y, mode=cfg.mode)
        s, yv = u_new - u, g_new - g
        if s @ yv > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            pairs.append((s, yv, 1.0 / (s @ yv)))
            if len(pairs) > cfg.memory:
                pairs.pop(0)
        u, f, g = u_new, f_new, g_new
        history.append({"iteration": it, "objective": f, "grad_norm": float(np.abs(g).max()), "u": u.tolist(),
                        "step": t})
        if callback is not None:
            callback(it, u, f, g)
    else:
        if float(np.abs(g).max()) <= cfg.grad_tol:
            reason = "grad_tol"
    converged = reason in ("grad_tol", "value_tol")
    return FitResult(u, problem.state.y, f, f0, len(history) - 1, converged, reason, history)


# ---------------------------------------------------------------------------
# protocols


@dataclass
class RecoveryReport:
    truth: np.ndarray
    start: np.ndarray
    result: FitResult
    vertex_error: float
    topology_match: bool
    adjoint_direct: float
    fd_resolve: float

    def to_json(self) -> dict:
        out = self.result.report()
        out.update(
            truth=self.truth.tolist(),
            start=self.start.tolist(),
            reduction=self.result.initial_value / self.result.value if self.result.value > 0 else float("inf"),
            vertex_error=self.vertex_error,
            topology_match=self.topology_match,
            adjoint_vs_direct=self.adjoint_direct,
            fd_through_resolve=self.fd_resolve,
        )
        return out


def _rel(a, b) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def synthetic_recovery(state: SystemState, rng, perturb: float = 0.2, spread: float = 0.3,
                       config: FitConfig | None = None, audit: bool = True) -> RecoveryReport:
    """Fit area targets back to a known equilibrium.

    Ground-truth targets are the uniform split of the domain scaled by
    factors in ``1 +- spread`` and renormalized; the fit starts from the truth
    scaled by ``1 +- perturb`` with random signs. The annotation consists of
    the interior vertices of the ground-truth equilibrium.
    """
    n = state.n_sites
    area = state.boundary.domain_at(state.p).area()
    truth = rng.uniform(1 - spread, 1 + spread, n)
    truth *= area / truth.sum()
    base = FitProblem(state, lambda th, k: (0.0, np.zeros_like(th)))
    y_true = base.equilibrium(truth)
    diagram = state.diagram_at(y_true)[0]
    signature = diagram.topology_signature()
    ann = annotation_from_diagram(diagram)
    targets = ann.model_points()
    corr = Correspondence.nearest(diagram, targets)
    problem = FitProblem(state, VertexMatch(targets, corr), solver=base.solver)
    start = truth * (1 + perturb * rng.choice([-1.0, 1.0], n))
    y0 = problem.equilibrium(start, y_true)
    match = state.diagram_at(y0)[0].topology_signature() == signature
    ad = fd = float("nan")
    if audit:
        ga = sensitivity_gradient(problem, y0, mode="adjoint")
        gd = sensitivity_gradient(problem, y0, mode="direct")
        gf = resolve_gradient_fd(problem, start, y0)
        ad, fd = _rel(ga, gd), _rel(ga, gf)
    res = fit(problem, start, config)
    x = generated_positions(corr, problem.theta(res.y), n)[0]
    err = float(np.abs(x - targets).max() / state.boundary.domain_at(state.p).scale())
    return RecoveryReport(truth, start, res, err, match, ad, fd)


def annotation_problem(state: SystemState, annotation: Annotation, init_from_cells: bool = True):
    """Fit problem matching an annotation, with the frozen correspondence.

    When the annotation lists cells and their count equals the site count,
    sites start at the loop centroids with area targets equal to the loop
    areas before the first equilibrium solve.
    """
    pts = annotation.model_points()
    lookup = dict(zip(annotation.ids, pts))
    if init_from_cells and annotation.cells and len(annotation.cells) == state.n_sites:
        rows = state.params.copy()
        for i, loop in enumerate(annotation.cells.values()):
            poly = np.array([lookup[v] for v in loop])
            q = np.roll(poly, -1, axis=0)
            cr = poly[:, 0] * q[:, 1] - poly[:, 1] * q[:, 0]
            a = 0.5 * cr.sum()
            if a < 0:
                a, cr = -a, -cr
            rows[i, :2] = ((poly + q) * cr[:, None]).sum(axis=0) / (6 * a)
            rows[i, 3] = a
        state.params = rows
        state._cache.clear()
    base = FitProblem(state, lambda th, k: (0.0, np.zeros_like(th)))
    y = base.equilibrium(base.u)
    corr = Correspondence.nearest(state.diagram_at(y)[0], pts)
    return FitProblem(state, VertexMatch(pts, corr), solver=base.solver)
