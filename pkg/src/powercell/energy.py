"""Per-cell energies and their assembly over the parameter vector theta.

Each term is a function of the per-cell variables

    z = (A, Mx, My, S0, P, cx, cy, At)

where (A, Mx, My, S0, P) are the raw cell integrals from
:mod:`powercell.measures`, (cx, cy) the site position and At the site's area
target. The total gradient and Hessian w.r.t. theta are obtained by chaining
through dQ/dX and the closed-form vertex derivatives dX/dtheta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .diagram import SITE_STRIDE, RestrictedDiagram
from .measures import EPS_AREA, NQ, MeasureSet, vertex_hessian_contraction, vertex_jacobian

Z_A, Z_MX, Z_MY, Z_S0, Z_P, Z_CX, Z_CY, Z_AT = range(8)
NZ = 8

TERM_KINDS = (
    "area_target",
    "relative_area",
    "perimeter",
    "perimeter_quadratic",
    "second_moment",
    "site_centroid",
    "site_moment",
    "gravity",
)


@dataclass(frozen=True)
class EnergyTerm:
    """One per-cell energy term.

    ``exponent`` divides the term by At**exponent; it is only meaningful for
    ``second_moment`` and ``site_centroid``.
    """

    kind: str
    coefficient: float
    exponent: float = 0.0

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ValueError(f"unknown energy term {self.kind!r}")
        if not np.isfinite(self.coefficient):
            raise ValueError("energy coefficient must be finite")
        if self.exponent and self.kind not in ("second_moment", "site_centroid"):
            raise ValueError(f"{self.kind} does not take an area-target exponent")

    @property
    def uses_target(self) -> bool:
        return self.kind in ("area_target", "relative_area") or self.exponent != 0.0


def _target_scale(at, e):
    """g = At**-e and its first two derivatives."""
    if e == 0.0:
        one = np.ones_like(at)
        return one, 0.0 * one, 0.0 * one
    with np.errstate(divide="ignore", invalid="ignore"):
        g = at ** (-e)
        return g, -e * g / at, e * (e + 1) * g / at**2


def _term(term: EnergyTerm, z, valid, order):
    n = len(z)
    a = term.coefficient
    f = np.zeros(n)
    fz = np.zeros((n, NZ)) if order >= 1 else None
    fzz = np.zeros((n, NZ, NZ)) if order >= 2 else None
    A, Mx, My, S0, P, cx, cy, At = z.T
    kind = term.kind

    if kind == "area_target":
        r = A - At
        f = a * r * r
        if order >= 1:
            fz[:, Z_A] = 2 * a * r
            fz[:, Z_AT] = -2 * a * r
        if order >= 2:
            fzz[:, Z_A, Z_A] = fzz[:, Z_AT, Z_AT] = 2 * a
            fzz[:, Z_A, Z_AT] = fzz[:, Z_AT, Z_A] = -2 * a

    elif kind == "relative_area":
        # an empty cell sits at A/At = 0, keeping the term continuous in A
        live = A > EPS_AREA
        bad = (At <= 0) & live
        t = np.where(At > 0, At, 1.0)
        r = np.where(live, A / t - 1.0, -1.0)
        f = np.where(bad, np.inf, a * r * r)
        if order >= 1:
            fz[:, Z_A] = 2 * a * r / t
            fz[:, Z_AT] = -2 * a * r * A / t**2
        if order >= 2:
            fzz[:, Z_A, Z_A] = np.where(live, 2 * a / t**2, 0.0)
            fzz[:, Z_A, Z_AT] = fzz[:, Z_AT, Z_A] = -2 * a * (A / t**3 + r / t**2)
            fzz[:, Z_AT, Z_AT] = 2 * a * (A**2 / t**4 + 2 * r * A / t**3)

    elif kind == "perimeter":
        f = a * P
        if order >= 1:
            fz[:, Z_P] = a

    elif kind == "perimeter_quadratic":
        f = a * P * P
        if order >= 1:
            fz[:, Z_P] = 2 * a * P
        if order >= 2:
            fzz[:, Z_P, Z_P] = 2 * a

    elif kind in ("second_moment", "site_centroid"):
        ok = valid
        As = np.where(ok, A, 1.0)
        g, g1, g2 = _target_scale(At, term.exponent)
        bad = ok & ~np.isfinite(g) | (ok & (At <= 0) & (term.exponent != 0.0))
        g = np.where(bad | ~ok, 0.0, g)
        g1 = np.where(bad | ~ok, 0.0, g1)
        g2 = np.where(bad | ~ok, 0.0, g2)
        hz = np.zeros((n, NZ))
        hzz = np.zeros((n, NZ, NZ))
        if kind == "second_moment":
            m2 = Mx**2 + My**2
            h = np.where(ok, S0 - m2 / As, 0.0)
            hz[:, Z_S0] = 1.0
            hz[:, Z_MX] = -2 * Mx / As
            hz[:, Z_MY] = -2 * My / As
            hz[:, Z_A] = m2 / As**2
            hzz[:, Z_MX, Z_MX] = hzz[:, Z_MY, Z_MY] = -2 / As
            hzz[:, Z_MX, Z_A] = hzz[:, Z_A, Z_MX] = 2 * Mx / As**2
            hzz[:, Z_MY, Z_A] = hzz[:, Z_A, Z_MY] = 2 * My / As**2
            hzz[:, Z_A, Z_A] = -2 * m2 / As**3
        else:
            X = np.stack([Mx, My], axis=1) / As[:, None]
            c = np.stack([cx, cy], axis=1)
            d = c - X
            h = np.where(ok, (d * d).sum(axis=1), 0.0)
            dX = (d * X).sum(axis=1)
            XX = (X * X).sum(axis=1)
            for r, (zc, zm) in enumerate(((Z_CX, Z_MX), (Z_CY, Z_MY))):
                hz[:, zc] = 2 * d[:, r]
                hz[:, zm] = -2 * d[:, r] / As
                hzz[:, zc, zc] = 2.0
                hzz[:, zc, zm] = hzz[:, zm, zc] = -2.0 / As
                hzz[:, zm, zm] = 2.0 / As**2
                hzz[:, zc, Z_A] = hzz[:, Z_A, zc] = 2 * X[:, r] / As
                hzz[:, zm, Z_A] = hzz[:, Z_A, zm] = 2 * (d[:, r] - X[:, r]) / As**2
            hz[:, Z_A] = 2 * dX / As
            hzz[:, Z_A, Z_A] = 2 * XX / As**2 - 4 * dX / As**2
        hz[~ok] = 0.0
        hzz[~ok] = 0.0
        f = np.where(bad, np.inf, a * g * h)
        if order >= 1:
            fz = a * g[:, None] * hz
            fz[:, Z_AT] = a * g1 * h
        if order >= 2:
            fzz = a * g[:, None, None] * hzz
            fzz[:, :, Z_AT] += a * g1[:, None] * hz
            fzz[:, Z_AT, :] += a * g1[:, None] * hz
            fzz[:, Z_AT, Z_AT] = a * g2 * h

    elif kind == "site_moment":
        f = a * (S0 - 2 * (cx * Mx + cy * My) + (cx * cx + cy * cy) * A)
        if order >= 1:
            fz[:, Z_S0] = a
            fz[:, Z_MX] = -2 * a * cx
            fz[:, Z_MY] = -2 * a * cy
            fz[:, Z_A] = a * (cx * cx + cy * cy)
            fz[:, Z_CX] = a * (-2 * Mx + 2 * cx * A)
            fz[:, Z_CY] = a * (-2 * My + 2 * cy * A)
        if order >= 2:
            for zc, zm, c in ((Z_CX, Z_MX, cx), (Z_CY, Z_MY, cy)):
                fzz[:, zc, zm] = fzz[:, zm, zc] = -2 * a
                fzz[:, zc, Z_A] = fzz[:, Z_A, zc] = 2 * a * c
                fzz[:, zc, zc] = 2 * a * A

    elif kind == "gravity":
        f = a * My
        if order >= 1:
            fz[:, Z_MY] = a

    return np.asarray(f, dtype=float), fz, fzz


@dataclass
class ThetaEvaluation:
    value: float
    grad: np.ndarray | None
    hess: sp.csr_matrix | None
    diagram: RestrictedDiagram
    measures: MeasureSet
    cell_values: np.ndarray


@dataclass
class EnergyModel:
    """Weighted sum of per-cell terms.

    ``perimeter_weights`` scales interface and domain-boundary edge lengths
    separately inside the perimeter measure.
    """

    terms: list = field(default_factory=list)
    perimeter_weights: tuple = (1.0, 1.0)

    def cell_energy(self, z: np.ndarray, valid: np.ndarray, order: int = 2):
        n = len(z)
        f = np.zeros(n)
        fz = np.zeros((n, NZ)) if order >= 1 else None
        fzz = np.zeros((n, NZ, NZ)) if order >= 2 else None
        for term in self.terms:
            tf, tz, tzz = _term(term, z, valid, order)
            f = f + tf
            if order >= 1:
                fz += tz
            if order >= 2:
                fzz += tzz
        return f, fz, fzz

    def evaluate(self, diagram: RestrictedDiagram, theta: np.ndarray, order: int = 2) -> ThetaEvaluation:
        """Energy, gradient and Hessian w.r.t. theta for a built diagram."""
        n = diagram.n_sites
        n_theta = len(theta)
        ms = MeasureSet(diagram, order=order, perimeter_weights=self.perimeter_weights)
        site = np.asarray(theta[: SITE_STRIDE * n]).reshape(n, SITE_STRIDE)
        z = np.concatenate([ms.Q, site[:, 0:2], site[:, 3:4]], axis=1)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            f, fz, fzz = self.cell_energy(z, ms.valid, order)
        value = float(f.sum())
        if order == 0 or not np.isfinite(value):
            return ThetaEvaluation(value, None, None, diagram, ms, f)

        J = vertex_jacobian(diagram, n_theta)
        DQ = ms.dQdX()
        fq = fz[:, :NQ]
        ex = DQ.T @ fq.ravel()
        grad = J.T @ ex
        grad[SITE_STRIDE * np.arange(n)] += fz[:, Z_CX]
        grad[SITE_STRIDE * np.arange(n) + 1] += fz[:, Z_CY]
        grad[SITE_STRIDE * np.arange(n) + 3] += fz[:, Z_AT]
        if order == 1:
            return ThetaEvaluation(value, grad, None, diagram, ms, f)

        DQt = (DQ @ J).tocoo()
        cell, k = np.divmod(DQt.row, NQ)
        extra_rows = (NZ * np.arange(n)[:, None] + np.array([Z_CX, Z_CY, Z_AT])[None, :]).ravel()
        extra_cols = (SITE_STRIDE * np.arange(n)[:, None] + np.array([0, 1, 3])[None, :]).ravel()
        zjac = sp.csr_matrix(
            (
                np.concatenate([DQt.data, np.ones(3 * n)]),
                (np.concatenate([NZ * cell + k, extra_rows]), np.concatenate([DQt.col, extra_cols])),
            ),
            shape=(NZ * n, n_theta),
        )
        fblock = sp.bsr_matrix((fzz, np.arange(n), np.arange(n + 1)), shape=(NZ * n, NZ * n)).tocsr()
        h1 = zjac.T @ fblock @ zjac
        h2 = J.T @ ms.weighted_hessian_X(fq) @ J
        h3 = vertex_hessian_contraction(diagram, ex, n_theta)
        hess = (h1 + h2 + h3).tocsr()
        hess = 0.5 * (hess + hess.T)
        return ThetaEvaluation(value, grad, hess.tocsr(), diagram, ms, f)
