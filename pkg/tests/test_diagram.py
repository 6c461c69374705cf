import numpy as np
import pytest
from matplotlib.path import Path as MplPath

from powercell import audit
from powercell.diagram import (
    BB, BE, EE, CoincidentSites, DegenerateIntersection, GeneratorRecord, InvalidBoundary, PolygonDomain,
    bisector_line, build_restricted_diagram, edge_line, vertex_derivatives, vertex_solve,
)

UNIT = PolygonDomain.rectangle(0, 0, 1, 1)


def _x_of(line):
    # vertical line normal.x = offset with normal along x
    assert line.normal[1] == pytest.approx(0.0)
    return line.offset / line.normal[0]


class TestBisector:
    def test_unweighted_midline(self):
        ln = bisector_line((0, 0), 0.0, (1, 0), 0.0)
        assert ln.normal == (1.0, 0.0)
        assert ln.offset == pytest.approx(0.5)

    def test_weighted_shift(self):
        # |p-ci|^2 - 0.1 = |p-cj|^2 solved by hand: x = 0.6
        ln = bisector_line((0.25, 0.5), 0.1, (0.75, 0.5), 0.0)
        assert _x_of(ln) == pytest.approx(0.6, abs=1e-15)

    @pytest.mark.parametrize("w", [0.0, 0.2, -0.3, 1.1])
    def test_weight_formula(self, w):
        assert _x_of(bisector_line((0, 0), w, (1, 0), 0.0)) == pytest.approx((1 + w) / 2)

    def test_side_convention(self):
        ln = bisector_line((0, 0), 0.0, (1, 0), 0.0)
        assert ln.residual((0.1, 0.3)) < 0 < ln.residual((0.9, -0.2))

    def test_coincident_sites(self):
        with pytest.raises(CoincidentSites):
            bisector_line((0.3, 0.3), 0.0, (0.3, 0.3), 1.0)


class TestVertexSolve:
    def test_circumcenter(self):
        l1 = bisector_line((0, 0), 0, (1, 0), 0)
        l2 = bisector_line((0, 0), 0, (0, 1), 0)
        np.testing.assert_allclose(vertex_solve(l1, l2), [0.5, 0.5], atol=1e-15)

    def test_weighted_vertex(self):
        l1 = bisector_line((0, 0), 0.2, (1, 0), 0)
        l2 = bisector_line((0, 0), 0.2, (0, 1), 0)
        np.testing.assert_allclose(vertex_solve(l1, l2), [0.6, 0.6], atol=1e-15)

    def test_bisector_edge(self):
        x = vertex_solve(bisector_line((0, 0), 0, (1, 0), 0), edge_line((0, 0), (1, 0)))
        np.testing.assert_allclose(x, [0.5, 0.0], atol=1e-15)

    def test_parallel(self):
        with pytest.raises(DegenerateIntersection):
            vertex_solve(bisector_line((0, 0), 0, (1, 0), 0), bisector_line((1, 0), 0, (2, 0), 0))


class TestVertexDerivatives:
    def test_be_vertex_partials(self):
        # x = (1 + w0 - w1 + |c1|^2 - |c0|^2) / (2 (c1x - c0x)) on the edge y = 0
        gen = GeneratorRecord(BE, (0, 1), (0,))
        v = vertex_derivatives(gen, [(0, 0), (1, 0)], [0.0, 0.0], UNIT)
        np.testing.assert_allclose(v.position, [0.5, 0.0], atol=1e-15)
        idx, jac = v.jac_sites(2)
        col = dict(zip(idx.tolist(), jac[0]))
        assert col[0] == pytest.approx(0.5)
        assert col[2] == pytest.approx(0.5)
        assert col[6] == pytest.approx(-0.5)

    def test_uninvolved_sites_absent(self):
        rng = np.random.default_rng(3)
        pts = rng.random((12, 2))
        d = build_restricted_diagram(pts, np.zeros(12), UNIT)
        for v in range(d.n_vertices):
            dv = d.vertex(v)
            sites = set((dv.jac_sites(12)[0] // 4).tolist())
            assert sites <= set(dv.generator.site_ids)

    def test_generator_record_invariants(self):
        with pytest.raises(ValueError):
            GeneratorRecord(BB, (0, 1), ())
        with pytest.raises(ValueError):
            GeneratorRecord(BE, (0, 1), ())
        GeneratorRecord(EE, (3,), (0, 1))

    def test_fd_agreement(self):
        rep = audit.vertex_audit(n_diagrams=8, seed=5)
        assert rep.passed, rep.metrics
        assert rep.metrics["max_jac_error"] < 1e-5
        assert rep.metrics["max_hess_error"] < 1e-4


class TestBuild:
    def test_single_site(self):
        d = build_restricted_diagram([(0.3, 0.8)], [0.0], UNIT)
        assert d.cell_areas()[0] == pytest.approx(1.0)
        assert d.n_vertices == 4
        assert all(d.generator(v).kind == EE for v in range(4))

    def test_two_sites(self):
        d = build_restricted_diagram([(0.25, 0.5), (0.75, 0.5)], [0, 0], UNIT)
        np.testing.assert_allclose(d.cell_areas(), [0.5, 0.5], atol=1e-15)
        for i, (lo, hi) in enumerate([(0.0, 0.5), (0.5, 1.0)]):
            (poly,) = d.cell_polygons(i)
            assert poly[:, 0].min() == pytest.approx(lo)
            assert poly[:, 0].max() == pytest.approx(hi)
        assert d.neighbors() == {(0, 1)}

    def test_cells_ccw_and_residuals(self):
        rng = np.random.default_rng(1)
        d = build_restricted_diagram(rng.random((30, 2)), rng.normal(0, 0.002, 30), UNIT)
        for i in range(30):
            for poly in d.cell_polygons(i):
                q = np.roll(poly, -1, axis=0)
                assert 0.5 * np.sum(poly[:, 0] * q[:, 1] - q[:, 0] * poly[:, 1]) > 0
        assert d.max_residual() < 1e-9

    def test_bb_vertices_shared(self):
        rng = np.random.default_rng(2)
        d = build_restricted_diagram(rng.random((20, 2)), np.zeros(20), UNIT)
        owners = {}
        for i, loops in enumerate(d.cells):
            for lp in loops:
                for v in lp:
                    owners.setdefault(int(v), set()).add(i)
        for v, who in owners.items():
            g = d.generator(v)
            if g.kind == BB:
                assert who == set(g.site_ids)

    def test_empty_cell_is_legal(self):
        d = build_restricted_diagram([(0.25, 0.5), (0.75, 0.5), (0.5, 0.5)], [0.5, 0.5, -1.0], UNIT)
        assert d.cells[2] == []
        assert d.cell_areas().sum() == pytest.approx(1.0, rel=1e-12)

    def test_coincident_sites_rejected(self):
        with pytest.raises(CoincidentSites):
            build_restricted_diagram([(0.5, 0.5), (0.5, 0.5)], [0, 0], UNIT)

    def test_invalid_boundary(self):
        bow = np.array([[0, 0], [1, 1], [1, 0], [0, 1]], float)
        with pytest.raises(InvalidBoundary):
            PolygonDomain(bow, [[0, 1, 2, 3]])
        with pytest.raises(InvalidBoundary):
            PolygonDomain(bow[[0, 2, 1, 3]][::-1], [[0, 1, 2, 3]])

    def test_brute_force_matches_pruned(self):
        rng = np.random.default_rng(7)
        pts, w = rng.random((40, 2)), rng.normal(0, 0.003, 40)
        a = build_restricted_diagram(pts, w, UNIT)
        b = build_restricted_diagram(pts, w, UNIT, brute_force=True)
        assert a.topology_signature() == b.topology_signature()
        np.testing.assert_allclose(a.cell_areas(), b.cell_areas(), atol=1e-14)

    def test_split_cell_on_u_domain(self):
        u = np.array([[0, 0], [3, 0], [3, 2], [2, 2], [2, 1], [1, 1], [1, 2], [0, 2]], float)
        dom = PolygonDomain(u, [list(range(8))])
        d = build_restricted_diagram([(1.5, 0.3), (1.5, 2.5)], [0, 0], dom)
        assert len(d.cells[1]) == 2
        # the bisector is y = 1.4: both arm tops above it
        assert d.cell_areas()[1] == pytest.approx(2 * 0.6)
        assert d.cell_areas().sum() == pytest.approx(dom.area(), rel=1e-12)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(4)
        pts, w = rng.random((15, 2)), rng.normal(0, 0.002, 15)
        t = np.array([0.3, -1.7])
        a = build_restricted_diagram(pts, w, UNIT)
        b = build_restricted_diagram(pts + t, w, UNIT.with_vertices(UNIT.vertices + t))
        assert a.topology_signature() == b.topology_signature()
        np.testing.assert_allclose(b.vertices, a.vertices + t, atol=1e-14)

    def test_weight_shift_invariance(self):
        rng = np.random.default_rng(5)
        pts, w = rng.random((15, 2)), rng.normal(0, 0.002, 15)
        a = build_restricted_diagram(pts, w, UNIT)
        b = build_restricted_diagram(pts, w + 0.37, UNIT)
        assert a.topology_signature() == b.topology_signature()
        np.testing.assert_allclose(b.vertices, a.vertices, atol=1e-14)

    def test_dump(self, tmp_path):
        d = build_restricted_diagram([(0.25, 0.5), (0.75, 0.5)], [0, 0], UNIT)
        d.dump(tmp_path / "d.json")
        import json

        data = json.loads((tmp_path / "d.json").read_text())
        assert data["schema_version"] == 1
        assert len(data["cells"]) == 2
        assert {v["kind"] for v in data["vertices"]} == {BE, EE}


def _raster_check(dom, pts, w, res=1024):
    d = build_restricted_diagram(pts, w, dom)
    lo, hi = dom.vertices.min(axis=0), dom.vertices.max(axis=0)
    px = float((hi - lo).max()) / res
    xs = lo[0] + (np.arange(res) + 0.5) * px
    ys = lo[1] + (np.arange(res) + 0.5) * px
    g = np.stack(np.meshgrid(xs, ys), -1).reshape(-1, 2)

    def region(loops):
        # outer loops add, clockwise loops cut holes
        inside = np.zeros(len(g), bool)
        holes = np.zeros(len(g), bool)
        for lp in loops:
            lp = np.asarray(lp)
            q = np.roll(lp, -1, axis=0)
            hit = MplPath(lp).contains_points(g)
            if np.sum(lp[:, 0] * q[:, 1] - q[:, 0] * lp[:, 1]) > 0:
                inside |= hit
            else:
                holes |= hit
        return inside & ~holes

    inside = region([dom.vertices[lp] for lp in dom.loops])
    # distance from every pixel to the domain boundary, to drop the 2 px rim
    rim = np.zeros(len(g), bool)
    for a, b in zip(dom.vertices[dom.edge_start], dom.vertices[dom.edge_end]):
        ab = b - a
        t = np.clip(((g - a) @ ab) / (ab @ ab), 0, 1)
        rim |= np.linalg.norm(g - (a + t[:, None] * ab), axis=1) < 2 * px
    pw = ((g[:, None, :] - pts[None]) ** 2).sum(-1) - w[None]
    order = np.argsort(pw, axis=1)
    best = order[:, 0]
    gap = np.take_along_axis(pw, order[:, 1:2], 1)[:, 0] - np.take_along_axis(pw, order[:, :1], 1)[:, 0]
    sep = np.linalg.norm(pts[order[:, 1]] - pts[best], axis=1)
    # power gap grows as 2 |ci - cj| times the distance to the bisector
    far = gap > 2 * sep * 2 * px
    label = np.full(len(g), -1)
    for i in range(len(pts)):
        if d.cells[i]:
            label[region(d.cell_polygons(i))] = i
    use = inside & ~rim & far
    agree = np.mean(label[use] == best[use])
    raster_area = np.bincount(best[inside], minlength=len(pts)) * px * px
    return d, agree, raster_area


@pytest.mark.parametrize("kind", ["rectangle", "nonconvex", "holed"])
def test_rasterization_oracle(kind):
    rng = np.random.default_rng({"rectangle": 1, "nonconvex": 2, "holed": 3}[kind])
    dom = audit.random_domain(kind, rng)
    pts = audit._sample(dom, 10, rng)
    w = rng.normal(0, 0.01, 10)
    d, agree, raster_area = _raster_check(dom, pts, w)
    assert agree == 1.0
    area = d.cell_areas()
    big = area > 0.02 * dom.area()
    np.testing.assert_allclose(raster_area[big], area[big], rtol=1e-2)
    assert abs(raster_area.sum() - dom.area()) / dom.area() < 1e-3


def test_tiling_sample():
    rep = audit.tiling_audit(n_diagrams=400, seed=9)
    assert rep.passed
    assert rep.metrics["max_relative_error"] < 1e-9


def test_split_cell_area_matches_raster():
    u = np.array([[0, 0], [3, 0], [3, 2], [2, 2], [2, 1], [1, 1], [1, 2], [0, 2]], float)
    dom = PolygonDomain(u, [list(range(8))])
    pts = np.array([(1.5, 2.5), (1.5, 0.3), (0.4, 0.3), (2.6, 0.3), (0.5, 1.0)])
    d, agree, raster_area = _raster_check(dom, pts, np.zeros(len(pts)))
    assert agree == 1.0
    split = [i for i in range(len(pts)) if len(d.cells[i]) > 1]
    assert split
    for i in split:
        assert abs(raster_area[i] - d.cell_areas()[i]) / d.cell_areas()[i] < 1e-3
