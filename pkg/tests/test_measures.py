import numpy as np
import pytest

from powercell import audit
from powercell.diagram import PolygonDomain, build_restricted_diagram
from powercell.measures import MeasureSet, cell_measures, edge_kernel, triangle_moments

UNIT = PolygonDomain.rectangle(0, 0, 1, 1)


class TestTriangleMoments:
    def test_unit_right_triangle(self):
        t = triangle_moments((1, 0), (0, 1))
        assert t["signed_area"] == pytest.approx(0.5)
        np.testing.assert_allclose(t["first_moment"], [1 / 6, 1 / 6])

    def test_orientation_flip(self):
        a, b = (0.3, -0.7), (1.2, 0.4)
        f, r = triangle_moments(a, b), triangle_moments(b, a)
        assert r["signed_area"] == -f["signed_area"]
        np.testing.assert_array_equal(r["first_moment"], -f["first_moment"])
        assert r["second_moment"] == -f["second_moment"]
        assert triangle_moments((0, 1), (1, 0))["signed_area"] == pytest.approx(-0.5)

    def test_second_moment(self):
        assert triangle_moments((1, 0), (0, 1))["second_moment"] == pytest.approx(1 / 6)

    def test_degenerate_is_zero(self):
        t = triangle_moments((1, 1), (2, 2))
        assert t["signed_area"] == 0.0
        np.testing.assert_array_equal(t["first_moment"], [0.0, 0.0])

    def test_quadrature_oracle(self):
        # the edge-midpoint rule integrates quadratics exactly on a triangle
        rng = np.random.default_rng(0)
        for _ in range(5):
            a, b = rng.normal(size=2), rng.normal(size=2)
            area = 0.5 * (a[0] * b[1] - a[1] * b[0])
            mids = np.array([a / 2, b / 2, (a + b) / 2])
            tm = triangle_moments(a, b)
            assert tm["signed_area"] == pytest.approx(area)
            np.testing.assert_allclose(tm["first_moment"], area * mids.mean(axis=0), rtol=1e-12)
            assert tm["second_moment"] == pytest.approx(area * np.mean(np.sum(mids**2, axis=1)), rel=1e-12)

    def test_edge_kernel_agrees(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        q, _, _ = edge_kernel(a, b, order=0)
        for k in range(5):
            t = triangle_moments(a[k], b[k])
            assert q[k, 0] == pytest.approx(t["signed_area"])
            np.testing.assert_allclose(q[k, 1:3], t["first_moment"])
            assert q[k, 3] == pytest.approx(t["second_moment"])
            assert q[k, 4] == pytest.approx(np.linalg.norm(b[k] - a[k]))


class TestCellMeasures:
    def test_unit_square(self):
        d = build_restricted_diagram([(0.3, 0.6)], [0.0], UNIT)
        cm = cell_measures(d, 0)
        assert cm.area == pytest.approx(1.0)
        np.testing.assert_allclose(cm.centroid, [0.5, 0.5])
        assert cm.perimeter == pytest.approx(4.0)
        assert cm.second_moment_about_centroid == pytest.approx(1 / 6)
        assert cm.centroid_valid

    def test_translation(self):
        rng = np.random.default_rng(2)
        pts, w = rng.random((8, 2)), rng.normal(0, 0.003, 8)
        t = np.array([2.5, -0.75])
        a = build_restricted_diagram(pts, w, UNIT)
        b = build_restricted_diagram(pts + t, w, UNIT.with_vertices(UNIT.vertices + t))
        for i in range(8):
            ma, mb = cell_measures(a, i), cell_measures(b, i)
            assert mb.area == pytest.approx(ma.area, rel=1e-12)
            assert mb.perimeter == pytest.approx(ma.perimeter, rel=1e-12)
            assert mb.second_moment_about_centroid == pytest.approx(ma.second_moment_about_centroid, rel=1e-9)
            np.testing.assert_allclose(mb.centroid, ma.centroid + t, atol=1e-12)

    @pytest.mark.parametrize("kind", ["rectangle", "nonconvex", "holed", "star"])
    def test_linear_moments_sum_to_domain(self, kind):
        rng = np.random.default_rng(3)
        dom = audit.random_domain(kind, rng)
        pts = audit._sample(dom, 30, rng)
        d = build_restricted_diagram(pts, rng.normal(0, 1e-3, 30), dom)
        total = sum(cell_measures(d, i).linear_moment for i in range(30))
        # the domain moment straight from the boundary polygon
        oracle = np.zeros(2)
        for lp in dom.loops:
            _, m = audit._shoelace(dom.vertices[lp])
            oracle += m
        np.testing.assert_allclose(total, oracle, rtol=1e-10, atol=1e-13)
        np.testing.assert_allclose(dom.moment(), oracle, rtol=1e-12, atol=1e-14)

    def test_parallel_axis_and_moment_identity(self):
        rng = np.random.default_rng(4)
        d = build_restricted_diagram(rng.random((20, 2)), rng.normal(0, 2e-3, 20), UNIT)
        for i in range(20):
            cm = cell_measures(d, i)
            if not cm.centroid_valid:
                continue
            np.testing.assert_allclose(cm.linear_moment, cm.area * cm.centroid, rtol=1e-12)
            expect = cm.origin_second_moment - cm.area * cm.centroid @ cm.centroid
            assert cm.second_moment_about_centroid == pytest.approx(expect, rel=1e-10)

    def test_reversed_loop_negates_area(self):
        pts = np.array([[0, 0], [2, 0], [2, 1], [0, 1]], float)
        fwd = edge_kernel(pts, np.roll(pts, -1, axis=0), order=0)[0].sum(axis=0)
        rev = pts[::-1]
        back = edge_kernel(rev, np.roll(rev, -1, axis=0), order=0)[0].sum(axis=0)
        np.testing.assert_allclose(back[:4], -fwd[:4])
        assert back[4] == pytest.approx(fwd[4])

    def test_empty_cell(self):
        d = build_restricted_diagram([(0.25, 0.5), (0.75, 0.5), (0.5, 0.5)], [0.5, 0.5, -1.0], UNIT)
        cm = cell_measures(d, 2)
        assert cm.area == 0.0 and cm.perimeter == 0.0
        assert not cm.centroid_valid
        np.testing.assert_allclose(cm.centroid, [0.5, 0.5])
        assert not MeasureSet(d).valid[2]

    def test_hole_reduces_area(self):
        dom = audit.random_domain("holed", np.random.default_rng(5))
        d = build_restricted_diagram([(-0.9, -0.9)], [0.0], dom)
        assert cell_measures(d, 0).area == pytest.approx(dom.area())
        assert dom.area() < 4.0

    def test_perimeter_weights(self):
        d = build_restricted_diagram([(0.25, 0.5), (0.75, 0.5)], [0, 0], UNIT)
        cm = cell_measures(d, 0, perimeter_weights=(1.0, 0.0))
        assert cm.perimeter == pytest.approx(1.0)

    def test_fd_agreement(self):
        rep = audit.measures_audit(n_cells=12, seed=6)
        assert rep.passed, rep.failures
        assert rep.metrics["max_grad_error"] < 1e-5
        assert rep.metrics["max_hess_error"] < 1e-4
