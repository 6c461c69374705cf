"""Restricted 2D power diagrams with closed-form vertex derivatives.

Every diagram vertex is the intersection of two lines. A line is either the
power bisector of two sites or the supporting line of a boundary edge, so a
vertex position is the solution of a 2x2 linear system whose coefficients are
polynomial in the generating inputs. First and second derivatives follow from
implicit differentiation of that system and are evaluated in batch.

Inputs are addressed through a flat parameter vector ``theta``::

    theta[4*i + 0:2]  position of site i
    theta[4*i + 2]    power weight of site i
    theta[4*i + 3]    area target of site i (unused by the geometry)
    theta[4*n + 2*a:2] coordinates of boundary vertex a
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

EPS_SITE = 1e-12
EPS_DET = 1e-12
EPS_RESID = 1e-9
SITE_STRIDE = 4

BB, BE, EE = "BB", "BE", "EE"

# vertex kind codes used by the batched kernel
KIND_BB, KIND_BE, KIND_CORNER, KIND_EE = 0, 1, 2, 3
LINE_BISECTOR, LINE_EDGE = 0, 1


class DiagramError(Exception):
    """Base class for diagram construction failures."""


class CoincidentSites(DiagramError):
    pass


class DegenerateIntersection(DiagramError):
    pass


class InvalidBoundary(DiagramError):
    pass


@dataclass(frozen=True)
class Line:
    """The line ``normal . x = offset``."""

    normal: tuple[float, float]
    offset: float

    def residual(self, p) -> float:
        return self.normal[0] * p[0] + self.normal[1] * p[1] - self.offset


@dataclass(frozen=True)
class GeneratorRecord:
    kind: str
    site_ids: tuple[int, ...]
    boundary_edge_ids: tuple[int, ...]

    def __post_init__(self):
        ns, ne = len(self.site_ids), len(self.boundary_edge_ids)
        ok = {BB: ns == 3 and ne == 0, BE: ns == 2 and ne == 1, EE: ns <= 1 and ne == 2}
        if self.kind not in ok or not ok[self.kind]:
            raise ValueError(f"inconsistent generator record {self!r}")


@dataclass(frozen=True)
class DiagramVertex:
    """A vertex with its first and second derivatives.

    ``jac`` has shape (2, k) and ``hess`` shape (2, k, k), both with respect to
    the theta entries listed in ``inputs`` (length k, no duplicates).
    """

    position: np.ndarray
    generator: GeneratorRecord
    inputs: np.ndarray
    jac: np.ndarray
    hess: np.ndarray

    def _split(self, n_sites: int, site: bool):
        mask = self.inputs < SITE_STRIDE * n_sites
        if not site:
            mask = ~mask
        return self.inputs[mask], self.jac[:, mask]

    def jac_sites(self, n_sites: int):
        """(theta indices, 2 x k block) for site inputs only."""
        return self._split(n_sites, True)

    def jac_boundary(self, n_sites: int):
        return self._split(n_sites, False)


def bisector_line(ci, wi: float, cj, wj: float) -> Line:
    """Power bisector of sites i and j; points with ``residual < 0`` belong to i."""
    dx, dy = cj[0] - ci[0], cj[1] - ci[1]
    if math.hypot(dx, dy) < EPS_SITE:
        raise CoincidentSites(f"sites at {tuple(ci)} and {tuple(cj)} coincide")
    off = 0.5 * (cj[0] ** 2 + cj[1] ** 2 - ci[0] ** 2 - ci[1] ** 2) + 0.5 * (wi - wj)
    return Line((float(dx), float(dy)), float(off))


def edge_line(a, b) -> Line:
    """Supporting line of the segment a -> b."""
    n = (a[1] - b[1], b[0] - a[0])
    return Line((float(n[0]), float(n[1])), float(n[0] * a[0] + n[1] * a[1]))


def vertex_solve(l1: Line, l2: Line) -> np.ndarray:
    (a, b), (c, d) = l1.normal, l2.normal
    det = a * d - b * c
    scale = math.hypot(a, b) * math.hypot(c, d)
    if abs(det) < EPS_DET * scale or scale == 0.0:
        raise DegenerateIntersection(f"lines {l1} and {l2} are parallel")
    return np.array([(d * l1.offset - b * l2.offset) / det, (a * l2.offset - c * l1.offset) / det])


# ---------------------------------------------------------------------------
# domain polygons


def _loop_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


class PolygonDomain:
    """Polygon loops over a shared vertex array.

    Loops with positive signed area are outer boundaries, negative ones are
    holes. Boundary edge ``e`` runs from ``edge_start[e]`` to ``edge_end[e]``
    and its interior side is on the left.
    """

    def __init__(self, vertices, loops: Sequence[Sequence[int]], validate: bool = True):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.loops = [np.asarray(lp, dtype=np.int64) for lp in loops]
        starts, ends = [], []
        for lp in self.loops:
            starts.extend(lp.tolist())
            ends.extend(np.roll(lp, -1).tolist())
        self.edge_start = np.array(starts, dtype=np.int64)
        self.edge_end = np.array(ends, dtype=np.int64)
        m = len(self.vertices)
        self.next_edge = np.full(m, -1, dtype=np.int64)
        self.prev_edge = np.full(m, -1, dtype=np.int64)
        self.next_edge[self.edge_start] = np.arange(len(starts))
        self.prev_edge[self.edge_end] = np.arange(len(ends))
        if validate:
            self.validate()

    @classmethod
    def rectangle(cls, x0, y0, x1, y1) -> "PolygonDomain":
        return cls([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], [[0, 1, 2, 3]])

    def with_vertices(self, vertices) -> "PolygonDomain":
        dom = PolygonDomain.__new__(PolygonDomain)
        dom.__dict__.update(self.__dict__)
        dom.vertices = np.ascontiguousarray(vertices, dtype=float)
        return dom

    def check_embedding(self) -> None:
        """Raise :class:`InvalidBoundary` if moved loops cross or flip orientation."""
        v = self.vertices
        p, r = v[self.edge_start], v[self.edge_end] - v[self.edge_start]
        dx = p[None, :, :] - p[:, None, :]

        def cross(a, b):
            return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]

        den = cross(r[:, None, :], r[None, :, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            t = cross(dx, r[None, :, :]) / den
            u = cross(dx, r[:, None, :]) / den
        hit = (t > 0) & (t < 1) & (u > 0) & (u < 1) & (den != 0)
        if np.any(np.triu(hit, 1)):
            e, f = np.argwhere(np.triu(hit, 1))[0]
            raise InvalidBoundary(f"boundary edges {e} and {f} intersect")
        if self.area() <= 0 or any(a == 0 for a in self.loop_areas()):
            raise InvalidBoundary("boundary loops lost their orientation")

    @property
    def n_edges(self) -> int:
        return len(self.edge_start)

    def loop_areas(self) -> list[float]:
        return [_loop_area(self.vertices[lp]) for lp in self.loops]

    def area(self) -> float:
        return float(sum(self.loop_areas()))

    def scale(self) -> float:
        lo, hi = self.vertices.min(axis=0), self.vertices.max(axis=0)
        return float(np.max(hi - lo))

    def moment(self) -> np.ndarray:
        """Integral of x over the domain."""
        out = np.zeros(2)
        for lp in self.loops:
            a = self.vertices[lp]
            b = np.roll(a, -1, axis=0)
            cr = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
            out += (cr[:, None] * (a + b)).sum(axis=0) / 6.0
        return out

    def validate(self) -> None:
        if len(np.unique(np.concatenate(self.loops))) != sum(len(lp) for lp in self.loops):
            raise InvalidBoundary("a boundary vertex is shared between loops")
        areas = self.loop_areas()
        if any(len(lp) < 3 for lp in self.loops):
            raise InvalidBoundary("loop with fewer than three vertices")
        if not any(a > 0 for a in areas):
            raise InvalidBoundary("no counter-clockwise outer loop")
        if any(a == 0 for a in areas):
            raise InvalidBoundary("degenerate loop")
        if self.area() <= 0:
            raise InvalidBoundary("holes exceed the outer area (misoriented loops?)")
        segs = [(self.vertices[a], self.vertices[b]) for a, b in zip(self.edge_start, self.edge_end)]
        for e in range(len(segs)):
            for f in range(e + 1, len(segs)):
                if _segments_cross(*segs[e], *segs[f]):
                    raise InvalidBoundary(f"boundary edges {e} and {f} intersect")
        # holes must lie inside some outer loop
        outers = [lp for lp, a in zip(self.loops, areas) if a > 0]
        for lp, a in zip(self.loops, areas):
            if a < 0:
                p = self.vertices[lp[0]]
                if not any(_point_in_loop(p, self.vertices[o]) for o in outers):
                    raise InvalidBoundary("hole lies outside every outer loop")


def _point_in_loop(p, pts) -> bool:
    inside = False
    n = len(pts)
    for k in range(n):
        a, b = pts[k], pts[(k + 1) % n]
        if (a[1] > p[1]) != (b[1] > p[1]):
            x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if x > p[0]:
                inside = not inside
    return inside


# ---------------------------------------------------------------------------
# half-plane clipping of multi-loop regions
#
# A region is a list of loops; each loop is a list of (x, y, line) where
# ``line`` tags the edge leaving that point: j >= 0 is the bisector with site
# j, -(e + 1) is boundary edge e.


def _clip(loops, nx, ny, off, tag):
    kept = []
    chains = []
    for loop in loops:
        s = [nx * p[0] + ny * p[1] - off for p in loop]
        if max(s) <= 0.0:
            kept.append(loop)
            continue
        if min(s) > 0.0:
            continue
        m = len(loop)
        k0 = next(k for k in range(m) if s[k] <= 0.0 and s[k - 1] > 0.0)
        chain = None
        for step in range(m):
            k = (k0 + step) % m
            p = loop[k]
            sk = s[k]
            if sk <= 0.0:
                if chain is None:
                    q = loop[k - 1]
                    sq = s[k - 1]
                    t = sq / (sq - sk)
                    chain = [(q[0] + t * (p[0] - q[0]), q[1] + t * (p[1] - q[1]), q[2])]
                chain.append(p)
                kn = (k + 1) % m
                sn = s[kn]
                if sn > 0.0:
                    q = loop[kn]
                    t = sk / (sk - sn)
                    chain.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]), tag))
                    chains.append(chain)
                    chain = None
    if not chains:
        return kept
    if len(chains) == 1:
        kept.append(chains[0])
        return kept
    dx, dy = -ny, nx
    events = []
    for c, ch in enumerate(chains):
        events.append((dx * ch[-1][0] + dy * ch[-1][1], 0, c))
        events.append((dx * ch[0][0] + dy * ch[0][1], 1, c))
    events.sort()
    follow = {}
    for k in range(0, len(events), 2):
        ex, en = events[k], events[k + 1]
        if ex[1] != 0 or en[1] != 1:
            raise DegenerateIntersection("inconsistent crossing order while clipping")
        follow[ex[2]] = en[2]
    done = set()
    for c in range(len(chains)):
        if c in done:
            continue
        loop = []
        cur = c
        while cur not in done:
            done.add(cur)
            loop.extend(chains[cur])
            cur = follow[cur]
        kept.append(loop)
    return kept


def _region_area(loops) -> float:
    a = 0.0
    for loop in loops:
        px, py = loop[-1][0], loop[-1][1]
        for p in loop:
            a += px * p[1] - py * p[0]
            px, py = p[0], p[1]
    return 0.5 * a


# ---------------------------------------------------------------------------
# batched vertex kernel

_DN_BIS = np.array([[-1.0, 0, 0, 1, 0, 0], [0, -1, 0, 0, 1, 0]])
_DN_EDGE = np.array([[0.0, 1, 0, -1, 0, 0], [-1, 0, 1, 0, 0, 0]])
_D2B_BIS = np.diag([-1.0, -1, 0, 1, 1, 0])
_D2B_EDGE = np.zeros((6, 6))
_D2B_EDGE[0, 3] = _D2B_EDGE[3, 0] = -1.0
_D2B_EDGE[1, 2] = _D2B_EDGE[2, 1] = 1.0


def line_slots(lines: np.ndarray, n_sites: int) -> np.ndarray:
    """theta indices (..., 6) of the inputs of each line spec (type, g0, g1)."""
    typ, g0, g1 = lines[..., 0], lines[..., 1], lines[..., 2]
    off = SITE_STRIDE * n_sites
    bis = np.stack([4 * g0, 4 * g0 + 1, 4 * g0 + 2, 4 * g1, 4 * g1 + 1, 4 * g1 + 2], axis=-1)
    edge = np.stack(
        [off + 2 * g0, off + 2 * g0 + 1, off + 2 * g1, off + 2 * g1 + 1, -np.ones_like(g0), -np.ones_like(g0)],
        axis=-1,
    )
    return np.where((typ == LINE_BISECTOR)[..., None], bis, edge)


def vertex_kernel(kinds, lines, theta, n_sites: int, order: int = 2, check: bool = True):
    """Positions and derivatives of a batch of vertices.

    Args:
        kinds: (V,) vertex kind codes.
        lines: (V, 2, 3) integer line specs ``(type, g0, g1)``.
        theta: flat parameter vector.
        order: 0 for positions only, 1 adds jacobians, 2 adds second derivatives.

    Returns:
        ``(x, slots, jac, hess)`` with ``x`` (V, 2), ``slots`` (V, 12) theta
        indices (-1 for unused), ``jac`` (V, 2, 12), ``hess`` (V, 2, 12, 12).
        Missing orders are returned as None.
    """
    kinds = np.asarray(kinds)
    lines = np.asarray(lines)
    nv = len(kinds)
    slots = line_slots(lines, n_sites).reshape(nv, 12)
    theta = np.asarray(theta, dtype=float)
    s = np.where(slots >= 0, theta[np.maximum(slots, 0)], 0.0).reshape(nv, 2, 6)
    bis = lines[..., 0] == LINE_BISECTOR
    s0, s1, s2, s3, s4, s5 = (s[..., k] for k in range(6))
    nx = np.where(bis, s3 - s0, s1 - s3)
    ny = np.where(bis, s4 - s1, s2 - s0)
    b = np.where(bis, 0.5 * (s3 * s3 + s4 * s4 - s0 * s0 - s1 * s1) + 0.5 * (s2 - s5), s1 * s2 - s0 * s3)
    det = nx[:, 0] * ny[:, 1] - ny[:, 0] * nx[:, 1]
    corner = kinds == KIND_CORNER
    if check:
        scale = np.hypot(nx[:, 0], ny[:, 0]) * np.hypot(nx[:, 1], ny[:, 1])
        bad = (~corner) & ~(np.abs(det) >= EPS_DET * scale)
        if np.any(bad):
            raise DegenerateIntersection(f"{int(bad.sum())} vertices have parallel generating lines")
    safe = np.where(corner | (det == 0.0), 1.0, det)
    ainv = np.empty((nv, 2, 2))
    ainv[:, 0, 0] = ny[:, 1] / safe
    ainv[:, 0, 1] = -ny[:, 0] / safe
    ainv[:, 1, 0] = -nx[:, 1] / safe
    ainv[:, 1, 1] = nx[:, 0] / safe
    x = np.einsum("vrc,vc->vr", ainv, b)
    x[corner] = s[corner, 0, 0:2]
    if order == 0:
        return x, slots, None, None

    dn = np.where(bis[..., None, None], _DN_BIS, _DN_EDGE)  # (V, 2 lines, 2 comps, 6)
    db = np.where(
        bis[..., None],
        np.stack([-s0, -s1, 0.5 * np.ones_like(s0), s3, s4, -0.5 * np.ones_like(s0)], axis=-1),
        np.stack([-s3, s2, s1, -s0, np.zeros_like(s0), np.zeros_like(s0)], axis=-1),
    )
    da = np.zeros((nv, 2, 2, 12))
    da[:, 0, :, 0:6] = dn[:, 0]
    da[:, 1, :, 6:12] = dn[:, 1]
    drhs = np.zeros((nv, 2, 12))
    drhs[:, 0, 0:6] = db[:, 0]
    drhs[:, 1, 6:12] = db[:, 1]
    g = drhs - np.einsum("vrcp,vc->vrp", da, x)
    jac = np.einsum("vrc,vcp->vrp", ainv, g)
    jac[corner] = 0.0
    jac[corner, 0, 0] = 1.0
    jac[corner, 1, 1] = 1.0
    if order == 1:
        return x, slots, jac, None

    d2b = np.where(bis[..., None, None], _D2B_BIS, _D2B_EDGE)
    t = np.zeros((nv, 2, 12, 12))
    t[:, 0, 0:6, 0:6] = d2b[:, 0]
    t[:, 1, 6:12, 6:12] = d2b[:, 1]
    cross = np.einsum("vrcp,vcq->vrpq", da, jac)
    t -= cross + cross.transpose(0, 1, 3, 2)
    hess = np.einsum("vrc,vcpq->vrpq", ainv, t)
    hess[corner] = 0.0
    return x, slots, jac, hess


def generator_lines(gen: GeneratorRecord, domain: PolygonDomain):
    """Kind code and canonical line specs for a generator record."""
    if gen.kind == BB:
        i, j, k = sorted(gen.site_ids)
        return KIND_BB, [(LINE_BISECTOR, i, j), (LINE_BISECTOR, i, k)]
    if gen.kind == BE:
        i, j = sorted(gen.site_ids)
        (e,) = gen.boundary_edge_ids
        return KIND_BE, [(LINE_BISECTOR, i, j), (LINE_EDGE, int(domain.edge_start[e]), int(domain.edge_end[e]))]
    e1, e2 = gen.boundary_edge_ids
    spec = [(LINE_EDGE, int(domain.edge_start[e]), int(domain.edge_end[e])) for e in (e1, e2)]
    if domain.edge_end[e1] == domain.edge_start[e2]:
        return KIND_CORNER, [spec[1], spec[0]]
    if domain.edge_end[e2] == domain.edge_start[e1]:
        return KIND_CORNER, [spec[0], spec[1]]
    return KIND_EE, spec


def make_theta(positions, weights, boundary_vertices, area_targets=None) -> np.ndarray:
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    n = len(positions)
    site = np.zeros((n, SITE_STRIDE))
    site[:, 0:2] = positions
    site[:, 2] = np.broadcast_to(np.asarray(weights, dtype=float), (n,))
    if area_targets is not None:
        site[:, 3] = np.broadcast_to(np.asarray(area_targets, dtype=float), (n,))
    return np.concatenate([site.ravel(), np.asarray(boundary_vertices, dtype=float).ravel()])


def vertex_derivatives(generator: GeneratorRecord, positions, weights, domain: PolygonDomain, owner: int | None = None):
    """Closed-form position and derivatives of one generator's vertex."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    n = len(positions)
    kind, spec = generator_lines(generator, domain)
    theta = make_theta(positions, weights, domain.vertices)
    x, slots, jac, hess = vertex_kernel([kind], np.array([spec]), theta, n, order=2)
    return _compress_vertex(generator, x[0], slots[0], jac[0], hess[0])


def _compress_vertex(gen, x, slots, jac, hess) -> DiagramVertex:
    valid = slots >= 0
    inputs = np.unique(slots[valid])
    pick = np.zeros((12, len(inputs)))
    pick[np.nonzero(valid)[0], np.searchsorted(inputs, slots[valid])] = 1.0
    j = jac @ pick
    h = np.einsum("pa,rpq,qb->rab", pick, hess, pick)
    return DiagramVertex(np.array(x), gen, inputs, j, h)


# ---------------------------------------------------------------------------
# diagram construction


@dataclass
class RestrictedDiagram:
    """Per-site clipped cells sharing a deduplicated vertex pool.

    ``cells[i]`` is a list of integer arrays; each array is a closed loop of
    vertex indices, counter-clockwise for outer components and clockwise for
    holes inside a cell. ``edge_*`` arrays describe every directed loop edge.
    """

    n_sites: int
    domain: PolygonDomain
    positions_in: np.ndarray
    weights_in: np.ndarray
    keys: list
    kinds: np.ndarray
    lines: np.ndarray
    cells: list
    edge_cell: np.ndarray
    edge_v0: np.ndarray
    edge_v1: np.ndarray
    edge_tag: np.ndarray
    vertices: np.ndarray = None
    _derivs: tuple | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.kinds)

    @property
    def theta(self) -> np.ndarray:
        return make_theta(self.positions_in, self.weights_in, self.domain.vertices)

    def derivatives(self):
        """Cached ``(slots, jac, hess)`` for all pool vertices."""
        if self._derivs is None:
            if self.n_vertices == 0:
                self._derivs = (np.zeros((0, 12), int), np.zeros((0, 2, 12)), np.zeros((0, 2, 12, 12)))
            else:
                x, slots, jac, hess = vertex_kernel(self.kinds, self.lines, self.theta, self.n_sites, order=2)
                self._derivs = (slots, jac, hess)
        return self._derivs

    def generator(self, v: int) -> GeneratorRecord:
        key = self.keys[v]
        if key[0] == 0:
            return GeneratorRecord(BB, tuple(key[1:4]), ())
        if key[0] == 1:
            return GeneratorRecord(BE, (key[1], key[2]), (key[3],))
        if key[0] == 2:
            a = key[1]
            return GeneratorRecord(EE, (key[2],), (int(self.domain.prev_edge[a]), int(self.domain.next_edge[a])))
        return GeneratorRecord(EE, (key[3],), (key[1], key[2]))

    def vertex(self, v: int) -> DiagramVertex:
        slots, jac, hess = self.derivatives()
        return _compress_vertex(self.generator(v), self.vertices[v], slots[v], jac[v], hess[v])

    def neighbors(self) -> set[tuple[int, int]]:
        mask = self.edge_tag >= 0
        i, j = self.edge_cell[mask], self.edge_tag[mask]
        return {(int(min(a, b)), int(max(a, b))) for a, b in zip(i, j)}

    def cell_polygons(self, i: int) -> list[np.ndarray]:
        return [self.vertices[lp] for lp in self.cells[i]]

    def cell_areas(self) -> np.ndarray:
        a, b = self.vertices[self.edge_v0], self.vertices[self.edge_v1]
        cr = 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        return np.bincount(self.edge_cell, weights=cr, minlength=self.n_sites)

    def topology_signature(self) -> tuple:
        return tuple(sorted(self.keys))

    def max_residual(self) -> float:
        """Largest violation of a generating line equation over all vertices."""
        if self.n_vertices == 0:
            return 0.0
        th = self.theta
        worst = 0.0
        for v in range(self.n_vertices):
            for typ, g0, g1 in self.lines[v]:
                if typ == LINE_BISECTOR:
                    line = bisector_line(th[4 * g0:4 * g0 + 2], th[4 * g0 + 2], th[4 * g1:4 * g1 + 2], th[4 * g1 + 2])
                else:
                    line = edge_line(self.domain.vertices[g0], self.domain.vertices[g1])
                nrm = math.hypot(*line.normal)
                worst = max(worst, abs(line.residual(self.vertices[v])) / nrm)
        return worst

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "vertices": [
                {
                    "position": self.vertices[v].tolist(),
                    "kind": self.generator(v).kind,
                    "site_ids": list(self.generator(v).site_ids),
                    "boundary_edge_ids": list(self.generator(v).boundary_edge_ids),
                }
                for v in range(self.n_vertices)
            ],
            "cells": [[lp.tolist() for lp in loops] for loops in self.cells],
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def _vertex_key(i, lin, lout, domain):
    if lin >= 0 and lout >= 0:
        a, b, c = sorted((i, lin, lout))
        return (0, a, b, c)
    if lin >= 0 or lout >= 0:
        j = lin if lin >= 0 else lout
        e = -(lout if lin >= 0 else lin) - 1
        return (1, min(i, j), max(i, j), e)
    e1, e2 = -lin - 1, -lout - 1
    if domain.edge_end[e1] == domain.edge_start[e2]:
        return (2, int(domain.edge_start[e2]), i)
    return (3, min(e1, e2), max(e1, e2), i)


def _key_spec(key, domain):
    if key[0] == 0:
        return KIND_BB, ((LINE_BISECTOR, key[1], key[2]), (LINE_BISECTOR, key[1], key[3]))
    if key[0] == 1:
        e = key[3]
        return KIND_BE, ((LINE_BISECTOR, key[1], key[2]), (LINE_EDGE, int(domain.edge_start[e]), int(domain.edge_end[e])))
    if key[0] == 2:
        a = key[1]
        en, ep = int(domain.next_edge[a]), int(domain.prev_edge[a])
        return KIND_CORNER, (
            (LINE_EDGE, a, int(domain.edge_end[en])),
            (LINE_EDGE, int(domain.edge_start[ep]), a),
        )
    e1, e2 = key[1], key[2]
    return KIND_EE, tuple((LINE_EDGE, int(domain.edge_start[e]), int(domain.edge_end[e])) for e in (e1, e2))


def build_restricted_diagram(
    positions,
    weights,
    domain: PolygonDomain,
    brute_force: bool = False,
    eager_derivatives: bool = False,
    k_initial: int = 16,
) -> RestrictedDiagram:
    """Restricted power diagram of weighted sites inside ``domain``.

    Each cell is obtained by clipping the domain loops with the bisectors of
    the other sites in order of increasing distance. Clipping stops once the
    nearest unprocessed site cannot reach the current region (security radius
    bound, valid for any weights because it uses the largest weight).
    """
    pos = np.ascontiguousarray(positions, dtype=float).reshape(-1, 2)
    n = len(pos)
    if n < 1:
        raise ValueError("at least one site is required")
    w = np.ascontiguousarray(np.broadcast_to(np.asarray(weights, dtype=float), (n,)))
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(w))):
        raise ValueError("site positions and weights must be finite")
    tree = cKDTree(pos)
    if n > 1:
        dd, _ = tree.query(pos, k=2)
        if np.min(dd[:, 1]) < EPS_SITE:
            raise CoincidentSites("two sites coincide")
    w_max = float(w.max())
    px, py, pw = pos[:, 0].tolist(), pos[:, 1].tolist(), w.tolist()
    sq = (pos[:, 0] ** 2 + pos[:, 1] ** 2).tolist()

    dv = domain.vertices
    base = []
    for lp in domain.loops:
        m = len(lp)
        base.append([(float(dv[lp[k], 0]), float(dv[lp[k], 1]), -(int(domain.next_edge[lp[k]]) + 1)) for k in range(m)])

    k0 = n if brute_force else min(n, k_initial)
    dist, idx = tree.query(pos, k=k0)
    dist = np.asarray(dist).reshape(n, k0)
    idx = np.asarray(idx).reshape(n, k0)

    pool: dict = {}
    keys: list = []
    cells: list = []
    e_cell, e_v0, e_v1, e_tag = [], [], [], []
    for i in range(n):
        xi, yi, wi, si = px[i], py[i], pw[i], sq[i]
        region = base
        di, ii = dist[i], idx[i]
        k = 1
        kk = k0
        while region:
            if k >= kk:
                if kk >= n:
                    break
                kk = min(n, 2 * kk)
                d2, i2 = tree.query(pos[i], k=kk)
                di, ii = np.atleast_1d(d2), np.atleast_1d(i2)
                continue
            d = float(di[k])
            if not brute_force:
                r2 = 0.0
                for loop in region:
                    for p in loop:
                        q = (p[0] - xi) ** 2 + (p[1] - yi) ** 2
                        if q > r2:
                            r2 = q
                bound = (d * d + wi - w_max) / (2.0 * d)
                if bound > 0.0 and bound * bound > r2 * (1.0 + 1e-12):
                    break
            j = int(ii[k])
            k += 1
            nx, ny = px[j] - xi, py[j] - yi
            off = 0.5 * (sq[j] - si) + 0.5 * (wi - pw[j])
            region = _clip(region, nx, ny, off, j)
        loops_out = []
        for loop in region:
            m = len(loop)
            # drop points whose incoming and outgoing edges share a line
            loop = [loop[k] for k in range(m) if loop[k][2] != loop[k - 1][2]]
            if len(loop) < 3:
                continue
            ids = []
            for k in range(len(loop)):
                key = _vertex_key(i, loop[k - 1][2], loop[k][2], domain)
                v = pool.get(key)
                if v is None:
                    v = len(keys)
                    pool[key] = v
                    keys.append(key)
                ids.append(v)
            loops_out.append(np.array(ids, dtype=np.int64))
            e_cell.extend([i] * len(ids))
            e_v0.extend(ids)
            e_v1.extend(ids[1:] + ids[:1])
            e_tag.extend(p[2] for p in loop)
        cells.append(loops_out)

    kinds = np.empty(len(keys), dtype=np.int64)
    lines = np.empty((len(keys), 2, 3), dtype=np.int64)
    for v, key in enumerate(keys):
        kd, spec = _key_spec(key, domain)
        kinds[v] = kd
        lines[v] = spec
    diag = RestrictedDiagram(
        n_sites=n,
        domain=domain,
        positions_in=pos,
        weights_in=w,
        keys=keys,
        kinds=kinds,
        lines=lines,
        cells=cells,
        edge_cell=np.array(e_cell, dtype=np.int64),
        edge_v0=np.array(e_v0, dtype=np.int64),
        edge_v1=np.array(e_v1, dtype=np.int64),
        edge_tag=np.array(e_tag, dtype=np.int64),
    )
    if len(keys):
        x, _, _, _ = vertex_kernel(kinds, lines, diag.theta, n, order=0)
    else:
        x = np.zeros((0, 2))
    diag.vertices = x
    if eager_derivatives:
        diag.derivatives()
    return diag
