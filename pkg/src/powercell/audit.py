"""Randomized derivative and invariant audits.

Every audit draws its instances from a seeded generator and compares the
closed-form derivatives against central finite differences or independent
geometric oracles. Each returns an :class:`AuditReport`; failing instances
are kept with enough data to rebuild them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .boundary import BoundaryModel, DeformableBody, RigidBody
from .diagram import DiagramError, PolygonDomain, build_restricted_diagram, vertex_kernel
from .energy import TERM_KINDS, EnergyModel, EnergyTerm
from .measures import cell_measures
from .system import SystemState

FD_STEP = 1e-6
GRAD_TOL = 1e-5
HESS_TOL = 1e-4
TILING_TOL = 1e-9
CONTINUITY_TOL = 1e-6
KINK_GAP = 1e-3
CVT_TOL = 1e-8
ADJOINT_TOL = 1e-10
RESOLVE_TOL = 1e-4

BOUNDARY_KINDS = ("rectangle", "nonconvex", "holed", "rigid", "deformable")
AREA_TERMS = ("area_target", "relative_area", "second_moment", "site_centroid", "site_moment", "gravity")
PERIMETER_TERMS = ("perimeter", "perimeter_quadratic")


@dataclass
class AuditReport:
    name: str
    passed: bool
    metrics: dict
    cases: int = 0
    seconds: float = 0.0
    failures: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "cases": int(self.cases),
            "seconds": float(self.seconds),
            "metrics": {k: float(v) if isinstance(v, (float, np.floating)) else v for k, v in self.metrics.items()},
            "failures": self.failures,
        }


def _rel(a, b, floor=1e-12) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size == 0:
        return 0.0
    return float(np.abs(a - b).max() / max(np.abs(b).max(), floor))


# --------------------------------------------------------------- instances


def random_domain(kind: str, rng) -> PolygonDomain:
    """One of the audit domain families, mildly randomized."""
    if kind == "rectangle":
        w, h = rng.uniform(0.6, 1.6, 2)
        return PolygonDomain.rectangle(0.0, 0.0, w, h)
    if kind == "nonconvex":
        # L shape with a random notch depth
        a, b = rng.uniform(0.35, 0.65, 2)
        v = np.array([[0, 0], [1, 0], [1, a], [b, a], [b, 1], [0, 1]], float)
        return PolygonDomain(v, [list(range(6))])
    if kind == "star":
        m = int(rng.integers(5, 12))
        ang = np.sort(rng.uniform(0, 2 * np.pi, m))
        ang += np.linspace(0, 2 * np.pi, m, endpoint=False) - ang + rng.uniform(-0.2, 0.2, m) * (2 * np.pi / m)
        r = rng.uniform(0.45, 1.0, m)
        v = np.c_[r * np.cos(ang), r * np.sin(ang)]
        return PolygonDomain(v, [list(range(m))])
    outer = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], float)
    m = int(rng.integers(4, 8))
    ang = -np.linspace(0, 2 * np.pi, m, endpoint=False) - rng.uniform(0, 1)
    r = rng.uniform(0.25, 0.4, m)
    hole = np.c_[r * np.cos(ang), r * np.sin(ang)] + rng.uniform(-0.2, 0.2, 2)
    return PolygonDomain(np.concatenate([outer, hole]), [list(range(4)), list(range(4, 4 + m))])


def _sample(domain: PolygonDomain, n, rng, margin=0.02):
    from .scene import sample_points

    return sample_points(domain, n, rng, margin)


def random_energy(rng, kinds=TERM_KINDS) -> EnergyModel:
    terms = []
    for kind in kinds:
        e = float(rng.choice([0.0, 1.0, 2.0])) if kind in ("second_moment", "site_centroid") else 0.0
        terms.append(EnergyTerm(kind, float(rng.uniform(0.2, 1.5)), e))
    return EnergyModel(terms, (1.0, float(rng.uniform(0.5, 1.0))))


def random_state(rng, boundary: str, n: int | None = None, kinds=TERM_KINDS) -> SystemState:
    """Random full-DOF system on one of the :data:`BOUNDARY_KINDS`."""
    if n is None:
        n = int(np.round(np.exp(rng.uniform(np.log(3), np.log(50)))))
    if boundary in ("rectangle", "nonconvex", "holed"):
        domain = random_domain(boundary, rng)
        model = BoundaryModel.fixed(domain)
    elif boundary == "rigid":
        domain = random_domain("holed", rng)
        body = RigidBody((1,), force=tuple(rng.normal(0, 0.3, 2)), torque=float(rng.normal(0, 0.3)))
        model = BoundaryModel(domain, [body])
    elif boundary == "deformable":
        m = 12
        ang = np.linspace(0, 2 * np.pi, m, endpoint=False)
        domain = PolygonDomain(np.c_[np.cos(ang), np.sin(ang)], [list(range(m))])
        model = BoundaryModel(domain, [DeformableBody((0,), stiffness=float(rng.uniform(0.1, 2.0)))])
    else:
        raise ValueError(f"unknown boundary kind {boundary!r}")
    area = domain.area()
    pts = _sample(domain, n, rng)
    spacing = area / n
    params = np.c_[pts, rng.normal(0, 0.02 * spacing, n), spacing * rng.uniform(0.7, 1.3, n)]
    state = SystemState(params, (True, True, True, True), model, random_energy(rng, kinds))
    if boundary == "rigid":
        state.p = np.array([*rng.uniform(-0.05, 0.05, 2), rng.uniform(-0.2, 0.2)])
    elif boundary == "deformable":
        state.p = state.p + rng.normal(0, 0.02, state.p.shape)
    return state


def _signature(state, y):
    return state.diagram_at(y)[0].topology_signature()


def _healthy(state, y, min_fraction=0.05) -> bool:
    # tiny cells put the FD step close to a topology change
    d = state.diagram_at(y)[0]
    a = d.cell_areas()
    return bool(a.min() > min_fraction * a.mean())


@dataclass
class FDCase:
    grad_error: float
    hess_error: float
    n_dofs: int
    degenerate: bool = False


def fd_check(state: SystemState, y=None, rng=None, step: float = FD_STEP, hess_columns: int = 16,
             hess_directions: int = 4) -> FDCase:
    """Central-difference check of the gradient and Hessian of ``state``.

    The gradient is differenced along every coordinate. The Hessian is
    checked column by column on a random subset of coordinates plus a few
    dense random directions (Hessian-vector products).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    y = state.y if y is None else np.asarray(y, float)
    nd = len(y)
    sig = _signature(state, y)
    ev = state.evaluate(y, order=2)
    g, H = ev.grad, ev.hess
    gfd = np.zeros(nd)
    for k in range(nd):
        e = np.zeros(nd)
        e[k] = step
        lo, hi = state.evaluate(y - e, order=0), state.evaluate(y + e, order=0)
        if lo.theta.diagram.topology_signature() != sig or hi.theta.diagram.topology_signature() != sig:
            return FDCase(np.nan, np.nan, nd, True)
        gfd[k] = (hi.value - lo.value) / (2 * step)
    cols = rng.choice(nd, size=min(hess_columns, nd), replace=False)
    dirs = [np.eye(nd)[k] for k in cols] + [rng.normal(size=nd) for _ in range(hess_directions)]
    herr = 0.0
    hscale = np.abs(H).max() if H.nnz else 1.0
    for d in dirs:
        d = d / np.abs(d).max()
        lo, hi = state.evaluate(y - step * d, order=1), state.evaluate(y + step * d, order=1)
        if lo.theta.diagram.topology_signature() != sig or hi.theta.diagram.topology_signature() != sig:
            return FDCase(np.nan, np.nan, nd, True)
        hv_fd = (hi.grad - lo.grad) / (2 * step)
        hv = H @ d
        herr = max(herr, float(np.abs(hv - hv_fd).max() / max(np.abs(hv).max(), 1e-8 * hscale, 1e-12)))
    return FDCase(_rel(g, gfd), herr, nd)


def derivative_audit(n_configs: int = 100, seed: int = 0, kinds=TERM_KINDS, max_draws: int = 10) -> AuditReport:
    """Gradient and Hessian FD audit over random systems of every boundary kind."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_g = worst_h = 0.0
    failures = []
    cases = skipped = 0
    sizes = []
    for c in range(n_configs):
        kind = BOUNDARY_KINDS[c % len(BOUNDARY_KINDS)]
        for _ in range(max_draws):
            state = random_state(rng, kind, kinds=kinds)
            try:
                if not _healthy(state, state.y):
                    skipped += 1
                    continue
                res = fd_check(state, rng=rng)
            except DiagramError:
                skipped += 1
                continue
            if res.degenerate:
                skipped += 1
                continue
            break
        else:
            failures.append({"case": c, "boundary": kind, "reason": "no nondegenerate draw"})
            continue
        cases += 1
        sizes.append(state.n_sites)
        worst_g, worst_h = max(worst_g, res.grad_error), max(worst_h, res.hess_error)
        if not (res.grad_error <= GRAD_TOL and res.hess_error <= HESS_TOL):
            failures.append(_replay(state, {"case": c, "boundary": kind, "grad_error": res.grad_error,
                                            "hess_error": res.hess_error}))
    return AuditReport(
        "energy",
        not failures and cases == n_configs,
        {"max_grad_error": worst_g, "max_hess_error": worst_h, "grad_tol": GRAD_TOL, "hess_tol": HESS_TOL,
         "skipped_draws": skipped, "min_sites": min(sizes, default=0), "max_sites": max(sizes, default=0)},
        cases,
        time.perf_counter() - t0,
        failures,
    )


def _replay(state: SystemState, info: dict) -> dict:
    out = dict(info)
    out.update(
        params=state.params.tolist(),
        p=state.p.tolist(),
        domain_vertices=state.boundary.domain.vertices.tolist(),
        domain_loops=[list(map(int, lp)) for lp in state.boundary.domain.loops],
        terms=[[t.kind, t.coefficient, t.exponent] for t in state.energy.terms],
    )
    return out


# ----------------------------------------------------------------- vertices


def vertex_audit(n_diagrams: int = 30, seed: int = 0, step: float = FD_STEP) -> AuditReport:
    """Closed-form vertex jacobians and Hessians against FD of the kernel."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    wj = wh = 0.0
    failures = []
    for c in range(n_diagrams):
        kind = ("rectangle", "nonconvex", "holed", "star")[c % 4]
        dom = random_domain(kind, rng)
        n = int(rng.integers(3, 25))
        pts = _sample(dom, n, rng)
        w = rng.normal(0, 0.01, n)
        d = build_restricted_diagram(pts, w, dom)
        theta = d.theta
        x, slots, jac, hess = vertex_kernel(d.kinds, d.lines, theta, n, order=2)
        nt = len(theta)
        J = np.zeros((2 * d.n_vertices, nt))
        for v in range(d.n_vertices):
            for s in range(12):
                if slots[v, s] >= 0:
                    J[2 * v:2 * v + 2, slots[v, s]] += jac[v, :, s]
        Jfd = np.zeros_like(J)
        lam = rng.normal(size=2 * d.n_vertices)
        from .measures import vertex_hessian_contraction

        Hc = vertex_hessian_contraction(d, lam, nt).toarray()
        Hfd = np.zeros((nt, nt))
        for k in range(nt):
            e = np.zeros(nt)
            e[k] = step
            xp, sp_, jp, _ = vertex_kernel(d.kinds, d.lines, theta + e, n, order=1)
            xm, _, jm, _ = vertex_kernel(d.kinds, d.lines, theta - e, n, order=1)
            Jfd[:, k] = ((xp - xm) / (2 * step)).ravel()
            # FD of J^T lam along e_k
            gp = np.zeros(nt)
            gm = np.zeros(nt)
            lv = lam.reshape(-1, 2)
            ok = sp_ >= 0
            np.add.at(gp, sp_[ok], np.einsum("vr,vrs->vs", lv, jp)[ok])
            np.add.at(gm, sp_[ok], np.einsum("vr,vrs->vs", lv, jm)[ok])
            Hfd[:, k] = (gp - gm) / (2 * step)
        ej, eh = _rel(J, Jfd), _rel(Hc, Hfd)
        wj, wh = max(wj, ej), max(wh, eh)
        if ej > GRAD_TOL or eh > HESS_TOL:
            failures.append({"case": c, "domain": kind, "jac_error": ej, "hess_error": eh,
                             "sites": pts.tolist(), "weights": w.tolist(), "domain_vertices": dom.vertices.tolist()})
    return AuditReport("vertex", not failures, {"max_jac_error": wj, "max_hess_error": wh}, n_diagrams,
                       time.perf_counter() - t0, failures)


# ----------------------------------------------------------------- measures

_MEASURES = ("area", "perimeter", "centroid_x", "centroid_y", "second_moment", "moment_x", "moment_y")


def _measure_values(cm):
    return {
        "area": cm.area,
        "perimeter": cm.perimeter,
        "centroid_x": cm.centroid[0],
        "centroid_y": cm.centroid[1],
        "second_moment": cm.second_moment_about_centroid,
        "moment_x": cm.linear_moment[0],
        "moment_y": cm.linear_moment[1],
    }


def measures_audit(n_cells: int = 40, seed: int = 0, step: float = FD_STEP) -> AuditReport:
    """Per-cell measure gradients and Hessians against FD with the diagram rebuilt."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    wg = wh = 0.0
    failures = []
    done = 0
    while done < n_cells:
        kind = ("rectangle", "nonconvex", "holed", "star")[done % 4]
        dom = random_domain(kind, rng)
        n = int(rng.integers(3, 15))
        pts = _sample(dom, n, rng)
        w = rng.normal(0, 0.01, n)
        d = build_restricted_diagram(pts, w, dom)
        if d.cell_areas().min() < 0.05 * d.cell_areas().mean():
            continue
        i = int(rng.integers(n))
        cm = cell_measures(d, i)
        theta = d.theta
        nsite = 4 * n

        def rebuild(th):
            return build_restricted_diagram(th[:nsite].reshape(n, 4)[:, :2], th[:nsite].reshape(n, 4)[:, 2],
                                            dom.with_vertices(th[nsite:].reshape(-1, 2)))

        sig = d.topology_signature()
        gfd = {m: np.zeros(len(cm.inputs)) for m in _MEASURES}
        hfd = {m: np.zeros((len(cm.inputs), len(cm.inputs))) for m in _MEASURES}
        bad = False
        for a, k in enumerate(cm.inputs):
            e = np.zeros(len(theta))
            e[k] = step
            dp, dm = rebuild(theta + e), rebuild(theta - e)
            if dp.topology_signature() != sig or dm.topology_signature() != sig:
                bad = True
                break
            cp, cmm = cell_measures(dp, i), cell_measures(dm, i)
            vp, vm = _measure_values(cp), _measure_values(cmm)
            for m in _MEASURES:
                gfd[m][a] = (vp[m] - vm[m]) / (2 * step)
                hfd[m][:, a] = (cp.grads[m] - cmm.grads[m]) / (2 * step)
        if bad:
            continue
        eg = max(_rel(cm.grads[m], gfd[m], 1e-9) for m in _MEASURES)
        eh = max(_rel(cm.hessians[m], hfd[m], 1e-9) for m in _MEASURES)
        wg, wh = max(wg, eg), max(wh, eh)
        if eg > GRAD_TOL or eh > HESS_TOL:
            failures.append({"case": done, "cell": i, "grad_error": eg, "hess_error": eh, "sites": pts.tolist(),
                             "weights": w.tolist(), "domain_vertices": dom.vertices.tolist(),
                             "domain_loops": [list(map(int, lp)) for lp in dom.loops]})
        done += 1
    return AuditReport("measures", not failures, {"max_grad_error": wg, "max_hess_error": wh}, done,
                       time.perf_counter() - t0, failures)


# ------------------------------------------------------------------- tiling


def tiling_audit(n_diagrams: int = 10_000, seed: int = 0) -> AuditReport:
    """Sum of cell areas against the domain area over random diagrams."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    failures = []
    kinds = ("rectangle", "nonconvex", "holed", "star")
    for c in range(n_diagrams):
        kind = kinds[c % 4]
        dom = random_domain(kind, rng)
        n = int(rng.integers(1, 24))
        pts = _sample(dom, n, rng, margin=0.0)
        # weights up to a sizable fraction of the cell scale, some cells empty
        w = rng.normal(0, 0.3 * dom.area() / n, n)
        try:
            d = build_restricted_diagram(pts, w, dom)
            err = abs(d.cell_areas().sum() - dom.area()) / dom.area()
        except DiagramError as exc:
            err = np.inf
            failures.append({"case": c, "error": str(exc)})
        worst = max(worst, err)
        if err > TILING_TOL and np.isfinite(err):
            failures.append({"case": c, "domain": kind, "error": err, "sites": pts.tolist(), "weights": w.tolist(),
                             "domain_vertices": dom.vertices.tolist(),
                             "domain_loops": [list(map(int, lp)) for lp in dom.loops]})
    return AuditReport("tiling", not failures, {"max_relative_error": worst, "tol": TILING_TOL}, n_diagrams,
                       time.perf_counter() - t0, failures)


# --------------------------------------------------------------- continuity


def crossing_path(rng=None):
    """Four sites whose straight-line path passes through one neighbor swap.

    The horizontal pair moves outwards while the vertical pair moves in, so
    the central interface changes from the left/right pair to the top/bottom
    pair. A random generic offset keeps the swap away from symmetric
    coincidences. Returns ``(params, direction, domain)`` with the path
    ``params + t * direction`` for t in [-1, 1].
    """
    rng = np.random.default_rng(0) if rng is None else rng
    base = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
    base += rng.uniform(-0.05, 0.05, base.shape)
    params = np.c_[base, rng.uniform(-0.02, 0.02, 4), np.full(4, 4.0)]
    d = np.zeros_like(params)
    d[:, :2] = 0.2 * np.array([[-1, 0], [1, 0], [0, 1], [0, -1]])
    return params, d, PolygonDomain.rectangle(-2.0, -2.0, 2.0, 2.0)


def one_sided_gradients(terms, rng=None, width: float = 1e-10):
    """Gradients in y on both sides of the neighbor swap of :func:`crossing_path`.

    Bisection on the topology signature brackets the swap to ``width``;
    the gradients are taken at the two bracket ends.
    """
    params, direction, dom = crossing_path(rng)
    model = EnergyModel([EnergyTerm(k, c) for k, c in terms])
    state = SystemState(params, (True, True, True, False), BoundaryModel.fixed(dom), model)
    y0 = state.y
    dy = direction.ravel()[state.site_dofs]
    lo, hi = -1.0, 1.0
    s_lo, s_hi = _signature(state, y0 + lo * dy), _signature(state, y0 + hi * dy)
    if s_lo == s_hi:
        raise RuntimeError("path does not cross a topology change")
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if _signature(state, y0 + mid * dy) == s_lo:
            lo = mid
        else:
            hi = mid
    g_lo = state.evaluate(y0 + lo * dy, order=1).grad
    g_hi = state.evaluate(y0 + hi * dy, order=1).grad
    return g_lo, g_hi, dy, 0.5 * (lo + hi)


def continuity_audit(seed: int = 0, terms=None) -> AuditReport:
    """Gradient jumps across a neighbor swap, separated into area-based and perimeter terms.

    Area-based terms must be continuous to :data:`CONTINUITY_TOL`; each
    perimeter term must show a one-sided derivative gap above :data:`KINK_GAP`.
    """
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    kinds = list(terms) if terms else list(AREA_TERMS + PERIMETER_TERMS)
    state_rng = np.random.default_rng(rng.integers(2**32))
    metrics = {}
    ok = True
    failures = []
    for kind in kinds + (["combined_area"] if terms is None else []):
        tl = [(k, 1.0) for k in AREA_TERMS] if kind == "combined_area" else [(kind, 1.0)]
        g_lo, g_hi, dy, t_star = one_sided_gradients(tl, np.random.default_rng(state_rng.integers(2**32)))
        jump = float(np.abs(g_hi - g_lo).max())
        slope_gap = float(abs((g_hi - g_lo) @ dy))
        kink = kind in PERIMETER_TERMS
        passed = jump > KINK_GAP if kink else jump <= CONTINUITY_TOL
        metrics[kind] = {"gradient_jump": jump, "directional_gap": slope_gap, "crossing": t_star,
                         "expect": "kink" if kink else "continuous", "passed": passed}
        if not passed:
            ok = False
            failures.append({"term": kind, "gradient_jump": jump})
    return AuditReport("continuity", ok, metrics, len(metrics), time.perf_counter() - t0, failures)


# ---------------------------------------------------------------------- CVT


def _shoelace(poly):
    q = np.roll(poly, -1, axis=0)
    cr = poly[:, 0] * q[:, 1] - poly[:, 1] * q[:, 0]
    a = 0.5 * cr.sum()
    return a, ((poly + q) * cr[:, None]).sum(axis=0) / 6.0


def cvt_audit(n_states: int = 100, seed: int = 0) -> AuditReport:
    """Site-moment gradient on an unweighted diagram versus 2 A (x - centroid)."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    failures = []
    model = EnergyModel([EnergyTerm("site_moment", 1.0)])
    for c in range(n_states):
        kind = ("rectangle", "nonconvex", "holed", "star")[c % 4]
        dom = random_domain(kind, rng)
        n = int(rng.integers(2, 40))
        pts = _sample(dom, n, rng)
        state = SystemState(np.c_[pts, np.zeros(n), np.ones(n)], (True, True, False, False), BoundaryModel.fixed(dom),
                            model)
        g = state.evaluate(order=1).grad.reshape(n, 2)
        d = state.diagram_at()[0]
        oracle = np.zeros((n, 2))
        for i in range(n):
            a_tot, m_tot = 0.0, np.zeros(2)
            for poly in d.cell_polygons(i):
                a, m = _shoelace(poly)
                a_tot += a
                m_tot += m
            oracle[i] = 2 * (a_tot * pts[i] - m_tot)
        err = _rel(g, oracle)
        worst = max(worst, err)
        if err > CVT_TOL:
            failures.append({"case": c, "domain": kind, "error": err, "sites": pts.tolist()})
    return AuditReport("cvt", not failures, {"max_relative_error": worst, "tol": CVT_TOL}, n_states,
                       time.perf_counter() - t0, failures)


# -------------------------------------------------------------- sensitivity


def sensitivity_audit(seed: int = 11, n_sites: int = 12) -> AuditReport:
    """Adjoint, direct and FD-through-resolve gradients of a vertex-match loss."""
    from . import config as cfgmod
    from .inverse import (Correspondence, FitProblem, VertexMatch, annotation_from_diagram, resolve_gradient_fd,
                          sensitivity_gradient)
    from .scene import build_state

    t0 = time.perf_counter()
    cfg = cfgmod.load(preset="fit20", overrides=[f"sites.count={n_sites}", f"scenario.seed={seed}"])
    rng = np.random.default_rng(seed)
    state, _ = build_state(cfg, rng)
    base = FitProblem(state, lambda th, k: (0.0, np.zeros_like(th)))
    area = state.boundary.domain.area()
    truth = rng.uniform(0.8, 1.2, n_sites)
    truth *= area / truth.sum()
    y_true = base.equilibrium(truth)
    diagram = state.diagram_at(y_true)[0]
    targets = annotation_from_diagram(diagram).model_points()
    corr = Correspondence.nearest(diagram, targets)
    problem = FitProblem(state, VertexMatch(targets, corr), solver=base.solver)
    u = truth * (1 + 0.05 * rng.choice([-1.0, 1.0], n_sites))
    y = problem.equilibrium(u, y_true)
    ga = sensitivity_gradient(problem, y, mode="adjoint")
    gd = sensitivity_gradient(problem, y, mode="direct")
    gf = resolve_gradient_fd(problem, u, y)
    ad, fd = _rel(ga, gd), _rel(ga, gf)
    ok = ad <= ADJOINT_TOL and fd <= RESOLVE_TOL
    fails = [] if ok else [{"seed": seed, "n_sites": n_sites, "u": u.tolist(), "adjoint_vs_direct": ad,
                            "adjoint_vs_fd": fd}]
    return AuditReport("inverse", ok, {"adjoint_vs_direct": ad, "adjoint_vs_fd": fd, "adjoint_tol": ADJOINT_TOL,
                                       "fd_tol": RESOLVE_TOL}, 1, time.perf_counter() - t0, fails)


AUDITS = {
    "vertex": vertex_audit,
    "measures": measures_audit,
    "energy": derivative_audit,
    "tiling": tiling_audit,
    "continuity": continuity_audit,
    "cvt": cvt_audit,
    "inverse": sensitivity_audit,
}
