"""Boundary motion models.

A :class:`BoundaryModel` maps a small parameter vector ``p`` to the polygon
domain vertices. Each loop of the domain belongs to exactly one body:

* :class:`FixedBody` contributes no parameters; its vertices follow a
  prescribed rest position that callers may update between steps.
* :class:`RigidBody` moves its loops by a translation and a rotation about a
  pivot, ``p = (tx, ty, angle)``, and carries an external force and torque.
* :class:`DeformableBody` exposes a subset of its vertices as free
  coordinates and adds a quadratic edge-length energy ``k * sum(l**2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .diagram import PolygonDomain


@dataclass
class FixedBody:
    loops: tuple


@dataclass
class RigidBody:
    loops: tuple
    pivot: np.ndarray | None = None
    force: tuple = (0.0, 0.0)
    torque: float = 0.0
    mass: tuple = (0.0, 0.0, 0.0)
    viscosity: tuple = (0.0, 0.0, 0.0)
    # the centripetal term of the vertex map is exact; dropping it gives a
    # Gauss-Newton style approximation of the boundary Hessian
    second_order: bool = True


@dataclass
class DeformableBody:
    loops: tuple
    stiffness: float = 0.0
    free: np.ndarray | None = None  # per-vertex mask over the whole domain
    mass: float = 0.0
    viscosity: float = 0.0


def _rot(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def _drot(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c], [c, -s]])


@dataclass
class BoundaryModel:
    """Domain topology plus per-loop motion bodies.

    Args:
        domain: rest configuration; loops not claimed by a body stay fixed.
        bodies: list of body descriptions.
    """

    domain: PolygonDomain
    bodies: list = field(default_factory=list)

    def __post_init__(self):
        nl = len(self.domain.loops)
        owner = -np.ones(nl, dtype=int)
        for b, body in enumerate(self.bodies):
            for l in body.loops:
                if not 0 <= l < nl:
                    raise ValueError(f"body {b} references missing loop {l}")
                if owner[l] >= 0:
                    raise ValueError(f"loop {l} claimed by two bodies")
                owner[l] = b
        self.rest = np.array(self.domain.vertices, dtype=float)
        m = len(self.rest)
        self._slices = []
        self._verts = []
        start = 0
        for body in self.bodies:
            vids = np.unique(np.concatenate([np.asarray(self.domain.loops[l]) for l in body.loops]))
            if isinstance(body, RigidBody):
                if body.pivot is None:
                    body.pivot = self.rest[vids].mean(axis=0)
                body.pivot = np.asarray(body.pivot, dtype=float)
                k = 3
            elif isinstance(body, DeformableBody):
                mask = np.ones(m, bool) if body.free is None else np.asarray(body.free, bool)
                if mask.shape != (m,):
                    raise ValueError("free mask must cover every domain vertex")
                vids = vids[mask[vids]]
                k = 2 * len(vids)
            else:
                k = 0
            self._verts.append(vids)
            self._slices.append(slice(start, start + k))
            start += k
        self.n_p = start

    @classmethod
    def fixed(cls, domain: PolygonDomain) -> "BoundaryModel":
        return cls(domain, [])

    def initial(self) -> np.ndarray:
        p = np.zeros(self.n_p)
        for body, sl, vids in zip(self.bodies, self._slices, self._verts):
            if isinstance(body, DeformableBody):
                p[sl] = self.rest[vids].ravel()
        return p

    def vertices(self, p) -> np.ndarray:
        v = self.rest.copy()
        for body, sl, vids in zip(self.bodies, self._slices, self._verts):
            q = p[sl]
            if isinstance(body, RigidBody):
                v[vids] = body.pivot + q[:2] + (self.rest[vids] - body.pivot) @ _rot(q[2]).T
            elif isinstance(body, DeformableBody):
                v[vids] = q.reshape(-1, 2)
        return v

    def domain_at(self, p) -> PolygonDomain:
        dom = self.domain.with_vertices(self.vertices(p))
        if any(not isinstance(b, FixedBody) for b in self.bodies):
            dom.check_embedding()
        return dom

    def jacobian(self, p) -> sp.csr_matrix:
        """d(vertex coords, flattened)/dp of shape (2m, n_p)."""
        rows, cols, vals = [], [], []
        for body, sl, vids in zip(self.bodies, self._slices, self._verts):
            q = p[sl]
            if isinstance(body, RigidBody):
                r = (self.rest[vids] - body.pivot) @ _drot(q[2]).T
                for d in range(2):
                    rows.append(2 * vids + d)
                    cols.append(np.full(len(vids), sl.start + d))
                    vals.append(np.ones(len(vids)))
                    rows.append(2 * vids + d)
                    cols.append(np.full(len(vids), sl.start + 2))
                    vals.append(r[:, d])
            elif isinstance(body, DeformableBody):
                k = np.arange(2 * len(vids))
                rows.append(2 * vids[k // 2] + k % 2)
                cols.append(sl.start + k)
                vals.append(np.ones(len(k)))
        m2 = 2 * len(self.rest)
        if not rows:
            return sp.csr_matrix((m2, self.n_p))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m2, self.n_p)
        )

    def curvature(self, p, gv) -> np.ndarray:
        """sum_k gv_k d^2 v_k/dp^2 as a dense (n_p, n_p) array."""
        out = np.zeros((self.n_p, self.n_p))
        g = np.asarray(gv).reshape(-1, 2)
        for body, sl, vids in zip(self.bodies, self._slices, self._verts):
            if isinstance(body, RigidBody) and body.second_order:
                r = (self.rest[vids] - body.pivot) @ _rot(p[sl][2]).T
                out[sl.start + 2, sl.start + 2] = -np.sum(g[vids] * r)
        return out

    def energy(self, p, order: int = 2):
        """External boundary energy (loads and membrane stiffness)."""
        value = 0.0
        grad = np.zeros(self.n_p)
        hess = np.zeros((self.n_p, self.n_p))
        for body, sl, vids in zip(self.bodies, self._slices, self._verts):
            q = p[sl]
            if isinstance(body, RigidBody):
                f = np.array([body.force[0], body.force[1], body.torque], dtype=float)
                value -= float(f @ q)
                grad[sl] -= f
            elif isinstance(body, DeformableBody) and body.stiffness:
                value, grad, hess = self._membrane(body, p, value, grad, hess)
        return value, grad, hess

    def _membrane(self, body, p, value, grad, hess):
        v = self.vertices(p)
        col = -np.ones((len(v), 2), dtype=int)
        sl = self._slices[self.bodies.index(body)]
        vids = self._verts[self.bodies.index(body)]
        col[vids] = sl.start + np.arange(2 * len(vids)).reshape(-1, 2)
        k = body.stiffness
        for l in body.loops:
            loop = np.asarray(self.domain.loops[l])
            a, b = loop, np.roll(loop, -1)
            d = v[b] - v[a]
            value += k * float(np.sum(d * d))
            for s, ends in ((1.0, b), (-1.0, a)):
                for c in range(2):
                    idx = col[ends, c]
                    ok = idx >= 0
                    np.add.at(grad, idx[ok], 2 * k * s * d[ok, c])
            for c in range(2):
                for ea, sa in ((a, -1.0), (b, 1.0)):
                    for eb, sb in ((a, -1.0), (b, 1.0)):
                        ia, ib = col[ea, c], col[eb, c]
                        ok = (ia >= 0) & (ib >= 0)
                        np.add.at(hess, (ia[ok], ib[ok]), 2 * k * sa * sb)
        return value, grad, hess

    def mass(self) -> np.ndarray:
        out = np.zeros(self.n_p)
        for body, sl in zip(self.bodies, self._slices):
            if isinstance(body, RigidBody):
                out[sl] = body.mass
            elif isinstance(body, DeformableBody):
                out[sl] = body.mass
        return out

    def viscosity(self) -> np.ndarray:
        out = np.zeros(self.n_p)
        for body, sl in zip(self.bodies, self._slices):
            if isinstance(body, RigidBody):
                out[sl] = body.viscosity
            elif isinstance(body, DeformableBody):
                out[sl] = body.viscosity
        return out
