"""Regularized Newton minimization and implicit time stepping.

The incremental objective for an implicit step is

    G(y) = |y'' |_M^2 / (2 c2) + |y'|_eta^2 / (2 c1) + E(y)

with y' and y'' the backward finite-difference stencils of the scheme and
c1, c2 their coefficients on y_{k+1}. Stationarity gives the discrete system
``M y'' + eta y' + grad E = 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .diagram import DiagramError

log = logging.getLogger(__name__)

SCHEMES = ("quasistatic", "bdf1", "bdf2", "momentumless_bdf1", "momentumless_bdf2")

# (velocity stencil, acceleration stencil) on (y_{k+1}, y_k, y_{k-1}, y_{k-2}),
# to be divided by h and h**2 respectively
STENCILS = {
    "bdf1": ((1.0, -1.0), (1.0, -2.0, 1.0)),
    "bdf2": ((1.5, -2.0, 0.5), (2.0, -5.0, 4.0, -1.0)),
}
# alternative BDF2 acceleration built from differencing BDF2 velocities;
# only first-order consistent, kept for comparison runs
BDF2_NESTED_ACCEL = (1.5, -3.5, 2.5, -0.5)


class SolverFailure(RuntimeError):
    pass


class LineSearchFailure(SolverFailure):
    pass


@dataclass
class SolverConfig:
    grad_tol: float = 1e-8
    max_iters: int = 100
    ls_shrink: float = 0.5
    ls_armijo: float = 1e-4
    ls_max: int = 40
    reg_init: float = 1e-8
    reg_growth: float = 10.0
    reg_max: float = 1e16
    time_step: float = 0.01
    scheme: str = "quasistatic"
    acceleration: str = "backward"  # or "nested"
    startup: str = "consistent"  # or "rest"
    warm_start: bool = True
    stall_step: float = 1e-14
    stall_decrease: float = 1e-14
    fallback_step: float = 1e-3
    plateau_window: int = 5
    plateau_decrease: float = 1e-12

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not self.time_step > 0:
            raise ValueError("time_step must be positive")
        if not 0 < self.ls_shrink < 1:
            raise ValueError("ls_shrink must lie in (0, 1)")
        if self.acceleration not in ("backward", "nested"):
            raise ValueError("acceleration must be 'backward' or 'nested'")
        if self.startup not in ("consistent", "rest"):
            raise ValueError("startup must be 'consistent' or 'rest'")

    @property
    def order(self) -> int:
        return 2 if self.scheme.endswith("bdf2") else 1

    @property
    def inertial(self) -> bool:
        return self.scheme in ("bdf1", "bdf2")

    @property
    def history_depth(self) -> int:
        if self.scheme == "quasistatic":
            return 1
        vel, acc = self.stencils()
        return len(acc) - 1 if self.inertial else len(vel) - 1

    def stencils(self):
        vel, acc = STENCILS["bdf2" if self.order == 2 else "bdf1"]
        if self.order == 2 and self.acceleration == "nested":
            acc = BDF2_NESTED_ACCEL
        return np.array(vel), np.array(acc)


@dataclass
class MinimizeResult:
    y: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    stalled: bool = False
    line_search_failed: bool = False
    values: list = field(default_factory=list)
    line_search_steps: int = 0
    terminated: bool = False


def _definite_lu(A):
    """LU of a symmetric matrix with diagonal pivoting, or None if not positive definite.

    With symmetric permutations and no off-diagonal pivoting the factorization
    is ``L D L^T`` up to scaling, so the pivot signs give the inertia.
    """
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    except RuntimeError:
        return None
    piv = lu.U.diagonal()
    if not np.all(np.isfinite(piv)) or np.any(piv <= 0.0):
        return None
    return lu


def _newton_direction(g, H, cfg: SolverConfig):
    """Newton direction on ``H + lam I`` with the smallest definite shift tried.

    The unshifted Hessian is tried first; otherwise ``lam`` follows the
    schedule ``reg_init * s, reg_growth * ...`` with ``s`` the mean absolute
    diagonal. Indefinite shifts are rejected so steps never climb toward
    saddles.
    """
    n = len(g)
    diag = np.abs(H.diagonal())
    scale = float(diag.mean()) if n and diag.mean() > 0 else 1.0
    lam = 0.0
    eye = sp.identity(n, format="csc")
    Hc = H.tocsc()
    while lam <= cfg.reg_max * scale:
        A = (Hc + lam * eye).tocsc()
        lu = _definite_lu(A)
        if lu is not None:
            d = lu.solve(-g)
            r = A @ d + g
            if np.linalg.norm(r) > 1e-10 * np.linalg.norm(g):
                d = d + lu.solve(-r)
            if np.all(np.isfinite(d)) and d @ g < 0:
                return d, lam
        lam = lam * cfg.reg_growth if lam > 0 else cfg.reg_init * scale
    return -g / scale, lam


def _line_search(objective, y, f0, d, slope, cfg, g0=None):
    t = 1.0
    noise = 64 * np.finfo(float).eps * max(abs(f0), 1.0)
    for k in range(cfg.ls_max + 1):
        trial = y + t * d
        try:
            val = objective(trial, 0).value
        except DiagramError:
            val = np.inf
        if np.isfinite(val) and val <= f0 + cfg.ls_armijo * t * slope:
            return trial, t, val, k
        if k == 0 and g0 is not None and np.isfinite(val) and abs(val - f0) <= noise:
            # the predicted decrease is below roundoff in the objective; a full
            # step that shrinks the gradient is accepted instead
            gt = objective(trial, 1).grad
            if np.linalg.norm(gt) < 0.5 * np.linalg.norm(g0):
                return trial, t, val, k
        t *= cfg.ls_shrink
    return None, t, np.inf, cfg.ls_max + 1


def minimize(objective, y0, config: SolverConfig | None = None, callback=None, terminate=None) -> MinimizeResult:
    """Damped Newton with Armijo backtracking.

    Args:
        objective: callable ``objective(y, order)`` returning an object with
            ``value``, ``grad`` and ``hess`` attributes (order 0, 1 or 2).
            Diagram failures at trial points count as rejected steps.
        y0: starting point; must be evaluable.
        terminate: optional ``terminate(y, ev) -> bool`` checked at accepted
            iterates; a true result ends the solve with ``terminated`` set.
    """
    cfg = config or SolverConfig()
    y = np.asarray(y0, dtype=float).copy()
    ev = objective(y, 2)
    if not np.isfinite(ev.value):
        raise SolverFailure("objective is not finite at the starting point")
    values = [ev.value]
    gnorms = [float(np.abs(ev.grad).max()) if len(ev.grad) else 0.0]
    ls_total = 0
    for it in range(cfg.max_iters + 1):
        gn = float(np.abs(ev.grad).max()) if len(ev.grad) else 0.0
        if callback is not None:
            callback(it, y, ev)
        if gn <= cfg.grad_tol:
            return MinimizeResult(y, ev.value, gn, it, True, values=values, line_search_steps=ls_total)
        if terminate is not None and it > 0 and terminate(y, ev):
            return MinimizeResult(y, ev.value, gn, it, False, values=values, line_search_steps=ls_total,
                                  terminated=True)
        if it == cfg.max_iters:
            break
        d, _ = _newton_direction(ev.grad, ev.hess, cfg)
        slope = float(d @ ev.grad)
        accepted, t, val, shrinks = _line_search(objective, y, ev.value, d, slope, cfg, ev.grad)
        ls_total += shrinks
        if t < cfg.fallback_step:
            # concave kinks (perimeter terms at neighbor exchanges) can pin the
            # Newton direction to a ridge; a gradient step leaves it
            gd = -ev.grad * (np.linalg.norm(d) / max(np.linalg.norm(ev.grad), 1e-300))
            acc2, t2, val2, shrinks = _line_search(objective, y, ev.value, gd, float(gd @ ev.grad), cfg)
            ls_total += shrinks
            if acc2 is not None and (accepted is None or val2 < val):
                accepted, t, d, slope = acc2, t2, gd, float(gd @ ev.grad)
        if accepted is None:
            # kink handling: tiny steps that no longer decrease the objective
            step = t * np.abs(d).max()
            if step < cfg.stall_step and abs(slope) * t < cfg.stall_decrease * max(abs(ev.value), 1.0):
                return MinimizeResult(y, ev.value, gn, it, True, stalled=True, values=values,
                                      line_search_steps=ls_total)
            log.warning("line search failed at iteration %d (|g|=%.3e)", it, gn)
            return MinimizeResult(y, ev.value, gn, it, False, line_search_failed=True, values=values,
                                  line_search_steps=ls_total)
        prev = ev.value
        y = accepted
        ev = objective(y, 2)
        values.append(ev.value)
        gnorms.append(float(np.abs(ev.grad).max()))
        w = cfg.plateau_window
        if w and len(values) > w:
            # resting on a convex kink: no decrease and no gradient progress
            flat = values[-w - 1] - values[-1] <= cfg.plateau_decrease * max(abs(values[-1]), 1.0)
            if flat and min(gnorms[-w:]) > 0.1 * gnorms[-w - 1]:
                return MinimizeResult(y, ev.value, gnorms[-1], it + 1, False, stalled=True, values=values,
                                      line_search_steps=ls_total)
        if abs(prev - ev.value) <= cfg.stall_decrease * max(abs(ev.value), 1.0) and t * np.abs(d).max() < cfg.stall_step:
            gn = float(np.abs(ev.grad).max())
            return MinimizeResult(y, ev.value, gn, it + 1, gn <= cfg.grad_tol, stalled=True, values=values,
                                  line_search_steps=ls_total)
    gn = float(np.abs(ev.grad).max())
    return MinimizeResult(y, ev.value, gn, cfg.max_iters, False, values=values, line_search_steps=ls_total)


class History:
    """Previous DOF vectors, most recent first: ``[y_k, y_{k-1}, ...]``.

    Entries are stored as full per-site parameter arrays plus boundary
    parameters so that they can be remapped after topology events.
    """

    def __init__(self, entries=None):
        self.entries = list(entries or [])

    @classmethod
    def at_rest(cls, state, depth: int) -> "History":
        return cls([(state.params.copy(), state.p.copy()) for _ in range(depth)])

    @classmethod
    def start(cls, state, config: SolverConfig, velocity=None) -> "History":
        """History consistent with the initial velocity and acceleration.

        Past states follow the second-order Taylor expansion of the
        trajectory through y0, with acceleration from the equation of motion
        for massive DOFs. Massless viscous DOFs start at their gradient-flow
        velocity. A rest history is used when ``config.startup == 'rest'``.
        """
        depth = config.history_depth
        if config.startup == "rest" or config.scheme == "quasistatic":
            return cls.at_rest(state, depth)
        y0 = state.y
        h = config.time_step
        m = state.mass_vector()
        eta = state.viscosity_vector()
        g = state.evaluate(order=1).grad
        v0 = np.zeros_like(y0) if velocity is None else np.asarray(velocity, dtype=float)
        if config.inertial:
            massless = m <= 0
        else:
            massless = np.ones(len(y0), bool)
        flow = massless & (eta > 0)
        if velocity is None:
            v0[flow] = -g[flow] / eta[flow]
        a0 = np.zeros_like(y0)
        if config.inertial:
            heavy = m > 0
            a0[heavy] = -(g[heavy] + eta[heavy] * v0[heavy]) / m[heavy]
        entries = []
        for j in range(depth):
            yj = y0 - j * h * v0 + 0.5 * (j * h) ** 2 * a0
            entries.append(state.params_at(yj))
        return cls([(p.copy(), q.copy()) for p, q in entries])

    def vectors(self, state):
        sd = state.site_dofs
        ns = len(sd)
        return [np.concatenate([p.ravel()[sd], q]) if len(p) == state.n_sites else None for p, q in self.entries]

    def push(self, state, depth: int):
        self.entries.insert(0, (state.params.copy(), state.p.copy()))
        del self.entries[depth:]

    def remap(self, keep, new_rows):
        """Keep site rows ``keep`` and append ``new_rows`` (one (4,) row per new site per entry)."""
        out = []
        for j, (p, q) in enumerate(self.entries):
            rows = [p[np.asarray(keep, dtype=int)]]
            if new_rows is not None and len(new_rows[j]):
                rows.append(np.asarray(new_rows[j], float).reshape(-1, p.shape[1]))
            out.append((np.concatenate(rows), q))
        self.entries = out


@dataclass
class _Eval:
    value: float
    grad: np.ndarray | None
    hess: sp.csr_matrix | None
    inner: object = None


class DynamicsObjective:
    """Incremental potential for one implicit step."""

    def __init__(self, state, history: History, config: SolverConfig):
        self.state = state
        self.cfg = config
        h = config.time_step
        past = history.vectors(state)
        self.m = state.mass_vector() if config.inertial else np.zeros(state.n_dofs)
        self.eta = state.viscosity_vector() if config.scheme != "quasistatic" else np.zeros(state.n_dofs)
        vel, acc = config.stencils()
        self.c1 = vel[0] / h
        self.c2 = acc[0] / h**2
        self.v_rest = sum(c * past[j] for j, c in enumerate(vel[1:])) / h if config.scheme != "quasistatic" else 0.0
        if config.inertial:
            self.a_rest = sum(c * past[j] for j, c in enumerate(acc[1:])) / h**2
        else:
            self.a_rest = 0.0

    def velocity(self, y):
        return self.c1 * y + self.v_rest

    def acceleration(self, y):
        return self.c2 * y + self.a_rest

    def __call__(self, y, order=2):
        ev = self.state.evaluate(y, order)
        value = ev.value
        grad = hess = None
        diag = np.zeros(len(y))
        if self.cfg.scheme != "quasistatic":
            v = self.velocity(y)
            value += float(v @ (self.eta * v)) / (2 * self.c1)
            diag += self.eta * self.c1
        if self.cfg.inertial:
            a = self.acceleration(y)
            value += float(a @ (self.m * a)) / (2 * self.c2)
            diag += self.m * self.c2
        if order >= 1 and np.isfinite(value):
            grad = ev.grad.copy()
            if self.cfg.scheme != "quasistatic":
                grad += self.eta * v
            if self.cfg.inertial:
                grad += self.m * a
            if order >= 2:
                hess = (ev.hess + sp.diags(diag)).tocsr()
        return _Eval(value, grad, hess, ev)


def dynamics_objective(state, history: History, y, config: SolverConfig, order: int = 2):
    return DynamicsObjective(state, history, config)(np.asarray(y, dtype=float), order)


def step(state, history: History, config: SolverConfig, terminate=None):
    """Advance one frame; updates ``state`` and ``history`` in place."""
    obj = DynamicsObjective(state, history, config)
    y_k = state.y
    y0 = y_k
    if config.warm_start and config.scheme != "quasistatic":
        past = history.vectors(state)
        if len(past) >= 2 and past[1] is not None:
            cand = 2 * past[0] - past[1]
            try:
                if np.isfinite(obj(cand, 0).value):
                    y0 = cand
            except DiagramError:
                pass
    res = minimize(obj, y0, config, terminate=terminate)
    state.set_y(res.y)
    history.push(state, config.history_depth)
    return res


class PotentialSystem:
    """Plain DOF vector with a user energy, usable wherever a state is expected.

    Args:
        energy: callable ``energy(y, order) -> (value, grad, hess)``.
        y0: initial DOFs.
        mass, viscosity: per-DOF coefficients.
    """

    n_sites = 0
    site_dofs = np.zeros(0, dtype=int)

    def __init__(self, energy, y0, mass=0.0, viscosity=0.0):
        self._energy = energy
        self.p = np.array(y0, dtype=float)
        self.params = np.zeros((0, 4))
        self._m = np.broadcast_to(mass, self.p.shape).astype(float)
        self._eta = np.broadcast_to(viscosity, self.p.shape).astype(float)

    @property
    def n_dofs(self):
        return len(self.p)

    @property
    def y(self):
        return self.p.copy()

    def set_y(self, y):
        self.p = np.array(y, dtype=float)

    def params_at(self, y):
        return self.params, np.asarray(y, dtype=float)

    def mass_vector(self):
        return self._m

    def viscosity_vector(self):
        return self._eta

    def evaluate(self, y=None, order=2):
        y = self.p if y is None else np.asarray(y, dtype=float)
        v, g, h = self._energy(y, order)
        return _Eval(float(v), None if order < 1 else np.asarray(g, float),
                     None if order < 2 else sp.csr_matrix(h))
