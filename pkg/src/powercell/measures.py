"""Cell integrals from origin-joined triangles, with analytic derivatives.

Each directed cell edge (a, b) spans the signed triangle (0, a, b). Summing
the triangle integrals over a closed loop gives the integral over the loop's
interior; clockwise hole loops contribute negatively. The per-cell raw
quantities are

    Q = (area, int x dA, int y dA, int |x|^2 dA, perimeter)

from which centroids and centred second moments are derived.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .diagram import RestrictedDiagram

Q_AREA, Q_MX, Q_MY, Q_S0, Q_PERIM = range(5)
NQ = 5

EPS_AREA = 1e-300

_H_AREA = np.zeros((4, 4))
_H_AREA[0, 3] = _H_AREA[3, 0] = 0.5
_H_AREA[1, 2] = _H_AREA[2, 1] = -0.5
_H_Q = np.array([[2.0, 0, 1, 0], [0, 2, 0, 1], [1, 0, 2, 0], [0, 1, 0, 2]])


def triangle_moments(a, b) -> dict:
    """Signed integrals over the triangle (origin, a, b)."""
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    area = 0.5 * (ax * by - ay * bx)
    return {
        "signed_area": area,
        "first_moment": np.array([area * (ax + bx) / 3.0, area * (ay + by) / 3.0]),
        "second_moment": area / 6.0 * (ax * ax + ay * ay + bx * bx + by * by + ax * bx + ay * by),
    }


def edge_kernel(a, b, order: int = 2, length_weight=1.0):
    """Edge contributions to Q and their derivatives w.r.t. (ax, ay, bx, by).

    Returns ``(q, dq, d2q)`` with shapes (E, 5), (E, 5, 4), (E, 5, 4, 4).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ne = len(a)
    ax, ay, bx, by = a[:, 0], a[:, 1], b[:, 0], b[:, 1]
    lw = np.broadcast_to(np.asarray(length_weight, dtype=float), (ne,))
    area = 0.5 * (ax * by - ay * bx)
    sx, sy = ax + bx, ay + by
    qq = ax * ax + ay * ay + bx * bx + by * by + ax * bx + ay * by
    ex, ey = bx - ax, by - ay
    length = np.sqrt(ex * ex + ey * ey)
    q = np.stack([area, area * sx / 3.0, area * sy / 3.0, area * qq / 6.0, lw * length], axis=1)
    if order == 0:
        return q, None, None

    zero = np.zeros(ne)
    one = np.ones(ne)
    g_area = 0.5 * np.stack([by, -bx, -ay, ax], axis=1)
    g_sx = np.stack([one, zero, one, zero], axis=1)
    g_sy = np.stack([zero, one, zero, one], axis=1)
    g_q = np.stack([2 * ax + bx, 2 * ay + by, 2 * bx + ax, 2 * by + ay], axis=1)
    safe = np.where(length > 0, length, 1.0)
    ux, uy = ex / safe, ey / safe
    g_len = np.stack([-ux, -uy, ux, uy], axis=1) * lw[:, None]
    dq = np.empty((ne, NQ, 4))
    dq[:, 0] = g_area
    dq[:, 1] = (sx[:, None] * g_area + area[:, None] * g_sx) / 3.0
    dq[:, 2] = (sy[:, None] * g_area + area[:, None] * g_sy) / 3.0
    dq[:, 3] = (qq[:, None] * g_area + area[:, None] * g_q) / 6.0
    dq[:, 4] = g_len
    if order == 1:
        return q, dq, None

    def sym_outer(u, v):
        o = np.einsum("ei,ej->eij", u, v)
        return o + o.transpose(0, 2, 1)

    d2q = np.empty((ne, NQ, 4, 4))
    d2q[:, 0] = _H_AREA
    d2q[:, 1] = (sym_outer(g_area, g_sx) + sx[:, None, None] * _H_AREA) / 3.0
    d2q[:, 2] = (sym_outer(g_area, g_sy) + sy[:, None, None] * _H_AREA) / 3.0
    d2q[:, 3] = (sym_outer(g_area, g_q) + qq[:, None, None] * _H_AREA + area[:, None, None] * _H_Q) / 6.0
    u = np.stack([ux, uy], axis=1)
    p = (np.eye(2)[None] - np.einsum("ei,ej->eij", u, u)) * (lw / safe)[:, None, None]
    d2q[:, 4, 0:2, 0:2] = p
    d2q[:, 4, 2:4, 2:4] = p
    d2q[:, 4, 0:2, 2:4] = -p
    d2q[:, 4, 2:4, 0:2] = -p
    return q, dq, d2q


class MeasureSet:
    """Raw quantities Q for every cell of a diagram plus derivative plumbing.

    Vertex coordinates are flattened as ``X[2*v + r]``.
    """

    def __init__(self, diagram: RestrictedDiagram, order: int = 2, perimeter_weights=(1.0, 1.0)):
        self.diagram = diagram
        self.order = order
        d = diagram
        lw = np.where(d.edge_tag >= 0, perimeter_weights[0], perimeter_weights[1])
        a, b = d.vertices[d.edge_v0], d.vertices[d.edge_v1]
        q, dq, d2q = edge_kernel(a, b, order=order, length_weight=lw)
        self.edge_q = q
        self.edge_dq = dq
        self.edge_d2q = d2q
        n = d.n_sites
        self.Q = np.zeros((n, NQ))
        np.add.at(self.Q, d.edge_cell, q)
        if order >= 1:
            # columns of the 4 edge coordinates in X
            self.edge_cols = np.stack(
                [2 * d.edge_v0, 2 * d.edge_v0 + 1, 2 * d.edge_v1, 2 * d.edge_v1 + 1], axis=1
            )

    @property
    def n_x(self) -> int:
        return 2 * self.diagram.n_vertices

    @property
    def area(self) -> np.ndarray:
        return self.Q[:, Q_AREA]

    @property
    def perimeter(self) -> np.ndarray:
        return self.Q[:, Q_PERIM]

    @property
    def valid(self) -> np.ndarray:
        return self.Q[:, Q_AREA] > EPS_AREA

    def centroids(self) -> np.ndarray:
        """Cell centroids; empty cells report their site position."""
        a = self.Q[:, Q_AREA]
        ok = a > EPS_AREA
        out = self.diagram.positions_in.copy()
        out[ok] = self.Q[ok, 1:3] / a[ok, None]
        return out

    def second_moments(self) -> np.ndarray:
        a = self.Q[:, Q_AREA]
        ok = a > EPS_AREA
        out = np.zeros(len(a))
        m2 = self.Q[ok, 1] ** 2 + self.Q[ok, 2] ** 2
        out[ok] = self.Q[ok, 3] - m2 / a[ok]
        return out

    def dQdX(self) -> sp.csr_matrix:
        """Sparse (5 n, 2 V) jacobian of Q w.r.t. vertex coordinates."""
        d = self.diagram
        rows = (NQ * d.edge_cell[:, None, None] + np.arange(NQ)[None, :, None]) * np.ones((1, 1, 4), int)
        cols = np.broadcast_to(self.edge_cols[:, None, :], rows.shape)
        return sp.csr_matrix(
            (self.edge_dq.ravel(), (rows.ravel(), cols.ravel())), shape=(NQ * d.n_sites, self.n_x)
        )

    def weighted_hessian_X(self, fq: np.ndarray) -> sp.csr_matrix:
        """sum_cells sum_k fq[cell, k] * d2 Q_k / dX^2 as a sparse (2V, 2V) matrix."""
        d = self.diagram
        blocks = np.einsum("ek,ekij->eij", fq[d.edge_cell], self.edge_d2q)
        rows = np.broadcast_to(self.edge_cols[:, :, None], blocks.shape)
        cols = np.broadcast_to(self.edge_cols[:, None, :], blocks.shape)
        return sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(self.n_x, self.n_x))


def vertex_jacobian(diagram: RestrictedDiagram, n_theta: int) -> sp.csr_matrix:
    """Sparse dX/dtheta of shape (2 V, n_theta)."""
    slots, jac, _ = diagram.derivatives()
    nv = diagram.n_vertices
    rows = np.broadcast_to((2 * np.arange(nv)[:, None, None] + np.arange(2)[None, :, None]), jac.shape)
    cols = np.broadcast_to(slots[:, None, :], jac.shape)
    keep = cols >= 0
    return sp.csr_matrix((jac[keep], (rows[keep], cols[keep])), shape=(2 * nv, n_theta))


def vertex_hessian_contraction(diagram: RestrictedDiagram, lam: np.ndarray, n_theta: int) -> sp.csr_matrix:
    """sum_v sum_r lam[2v + r] * d2 x_{v,r} / dtheta^2."""
    slots, _, hess = diagram.derivatives()
    lam = np.asarray(lam).reshape(-1, 2)
    blocks = np.einsum("vr,vrpq->vpq", lam, hess)
    rows = np.broadcast_to(slots[:, :, None], blocks.shape)
    cols = np.broadcast_to(slots[:, None, :], blocks.shape)
    keep = (rows >= 0) & (cols >= 0)
    return sp.csr_matrix((blocks[keep], (rows[keep], cols[keep])), shape=(n_theta, n_theta))


@dataclass
class CellMeasures:
    """Measures of one cell with derivatives w.r.t. the theta entries ``inputs``.

    ``grads[name]`` is a vector over ``inputs`` and ``hessians[name]`` the
    matching square matrix, for name in area, perimeter, centroid_x,
    centroid_y, second_moment, moment_x, moment_y.
    """

    area: float
    perimeter: float
    centroid: np.ndarray
    centroid_valid: bool
    second_moment_about_centroid: float
    linear_moment: np.ndarray
    origin_second_moment: float
    inputs: np.ndarray
    grads: dict
    hessians: dict


def cell_measures(diagram: RestrictedDiagram, i: int, perimeter_weights=(1.0, 1.0)) -> CellMeasures:
    """Measures of cell ``i`` with first and second derivatives chained to theta."""
    d = diagram
    mask = d.edge_cell == i
    lw = np.where(d.edge_tag[mask] >= 0, perimeter_weights[0], perimeter_weights[1])
    v0, v1 = d.edge_v0[mask], d.edge_v1[mask]
    q, dq, d2q = edge_kernel(d.vertices[v0], d.vertices[v1], order=2, length_weight=lw)
    Q = q.sum(axis=0) if len(q) else np.zeros(NQ)
    slots, jac, hess = d.derivatives()
    verts = np.unique(np.concatenate([v0, v1])) if len(v0) else np.zeros(0, int)
    inputs = np.unique(slots[verts][slots[verts] >= 0]) if len(verts) else np.zeros(0, int)
    k = len(inputs)
    # local X -> inputs jacobian
    nloc = 2 * len(verts)
    jx = np.zeros((nloc, k))
    hx = np.zeros((nloc, k, k))
    for a, v in enumerate(verts):
        ok = slots[v] >= 0
        idx = np.searchsorted(inputs, slots[v][ok])
        for r in range(2):
            np.add.at(jx[2 * a + r], idx, jac[v, r][ok])
            h = hess[v, r][np.ix_(ok, ok)]
            np.add.at(hx[2 * a + r], (idx[:, None], idx[None, :]), h)
    loc = {int(v): a for a, v in enumerate(verts)}
    gq = np.zeros((NQ, nloc))
    hq = np.zeros((NQ, nloc, nloc))
    for e in range(len(v0)):
        cols = [2 * loc[int(v0[e])], 2 * loc[int(v0[e])] + 1, 2 * loc[int(v1[e])], 2 * loc[int(v1[e])] + 1]
        gq[:, cols] += dq[e]
        hq[:, np.array(cols)[:, None], np.array(cols)[None, :]] += d2q[e]
    g_in = gq @ jx
    h_in = np.einsum("pa,kpq,qb->kab", jx, hq, jx) + np.einsum("kp,pab->kab", gq, hx)
    area = Q[0]
    valid = area > EPS_AREA
    grads = {"area": g_in[0], "perimeter": g_in[4], "moment_x": g_in[1], "moment_y": g_in[2]}
    hessians = {"area": h_in[0], "perimeter": h_in[4], "moment_x": h_in[1], "moment_y": h_in[2]}
    if valid:
        cx, cy = Q[1] / area, Q[2] / area
        m2 = Q[1] ** 2 + Q[2] ** 2
        second = Q[3] - m2 / area
        for key, comp in (("centroid_x", 1), ("centroid_y", 2)):
            g = g_in[comp] / area - Q[comp] * g_in[0] / area**2
            h = (
                h_in[comp] / area
                - (np.outer(g_in[comp], g_in[0]) + np.outer(g_in[0], g_in[comp])) / area**2
                - Q[comp] * h_in[0] / area**2
                + 2 * Q[comp] * np.outer(g_in[0], g_in[0]) / area**3
            )
            grads[key], hessians[key] = g, h
        # second = S0 - (Mx^2 + My^2) / A
        gm = 2 * (Q[1] * g_in[1] + Q[2] * g_in[2])
        hm = 2 * (np.outer(g_in[1], g_in[1]) + np.outer(g_in[2], g_in[2]) + Q[1] * h_in[1] + Q[2] * h_in[2])
        grads["second_moment"] = g_in[3] - gm / area + m2 * g_in[0] / area**2
        hessians["second_moment"] = (
            h_in[3]
            - hm / area
            + (np.outer(gm, g_in[0]) + np.outer(g_in[0], gm)) / area**2
            + m2 * h_in[0] / area**2
            - 2 * m2 * np.outer(g_in[0], g_in[0]) / area**3
        )
        centroid = np.array([cx, cy])
    else:
        second = 0.0
        centroid = d.positions_in[i].copy()
        for key in ("centroid_x", "centroid_y", "second_moment"):
            grads[key] = np.zeros(k)
            hessians[key] = np.zeros((k, k))
    return CellMeasures(
        area=float(area),
        perimeter=float(Q[4]),
        centroid=centroid,
        centroid_valid=bool(valid),
        second_moment_about_centroid=float(second),
        linear_moment=Q[1:3].copy(),
        origin_second_moment=float(Q[3]),
        inputs=inputs,
        grads=grads,
        hessians=hessians,
    )
