import numpy as np
import pytest
import scipy.sparse as sp

from powercell.boundary import BoundaryModel
from powercell.diagram import PolygonDomain
from powercell.energy import EnergyModel, EnergyTerm
from powercell.solve import (
    History, PotentialSystem, SolverConfig, _newton_direction, dynamics_objective, minimize, step,
)
from powercell.system import SystemState


def _quadratic(Q, a):
    Q = np.asarray(Q, float)

    def energy(y, order):
        r = y - a
        return 0.5 * r @ Q @ r, Q @ r, Q

    return energy


def _objective(system):
    return lambda y, order: system.evaluate(y, order)


class TestMinimize:
    def test_quadratic_one_step(self):
        rng = np.random.default_rng(0)
        B = rng.normal(size=(6, 6))
        Q = B @ B.T + 6 * np.eye(6)
        a = rng.normal(size=6)
        sys = PotentialSystem(_quadratic(Q, a), np.zeros(6))
        res = minimize(_objective(sys), sys.y, SolverConfig(grad_tol=1e-10))
        assert res.converged
        assert res.iterations == 1
        np.testing.assert_allclose(res.y, a, atol=1e-12)

    def test_single_site_stationary(self):
        energy = EnergyModel([EnergyTerm("area_target", 1.0), EnergyTerm("site_centroid", 1.0)])
        st = SystemState([[0.2, 0.7, 0.0, 0.8]], (True, True, False, False),
                         BoundaryModel.fixed(PolygonDomain.rectangle(0, 0, 1, 1)), energy)
        res = minimize(_objective(st), st.y, SolverConfig(grad_tol=1e-12))
        assert res.converged
        np.testing.assert_allclose(res.y, [0.5, 0.5], atol=1e-10)
        # stationarity by central differences of the energy
        h = 1e-6
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (st.evaluate(res.y + e, 0).value - st.evaluate(res.y - e, 0).value) / (2 * h)
            assert abs(fd) < 1e-8

    def test_descent_on_indefinite(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            B = rng.normal(size=(8, 8))
            H = sp.csr_matrix(B + B.T)
            g = rng.normal(size=8)
            d, lam = _newton_direction(g, H, SolverConfig())
            assert d @ g < 0
            if np.linalg.eigvalsh((B + B.T)).min() < 0:
                assert lam > 0

    def test_monotone_values(self):
        def rosen(y, order):
            x, z = y
            v = (1 - x) ** 2 + 10 * (z - x * x) ** 2
            g = np.array([-2 * (1 - x) - 40 * x * (z - x * x), 20 * (z - x * x)])
            H = np.array([[2 - 40 * (z - 3 * x * x), -40 * x], [-40 * x, 20.0]])
            return v, g, H

        sys = PotentialSystem(rosen, [-1.2, 1.0])
        res = minimize(_objective(sys), sys.y, SolverConfig(grad_tol=1e-10))
        assert res.converged
        assert np.all(np.diff(res.values) <= 0)
        np.testing.assert_allclose(res.y, [1, 1], atol=1e-8)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(ls_shrink=1.0)
        with pytest.raises(ValueError):
            SolverConfig(time_step=0.0)
        with pytest.raises(ValueError):
            SolverConfig(scheme="rk4")


def _zero(y, order):
    n = len(y)
    return 0.0, np.zeros(n), np.zeros((n, n))


class TestDynamics:
    def test_free_inertia(self):
        cfg = SolverConfig(scheme="bdf1", time_step=0.1, grad_tol=1e-12)
        sys = PotentialSystem(_zero, [1.0, 2.0], mass=1.0)
        hist = History([(sys.params, np.array([1.0, 2.0])), (sys.params, np.array([0.9, 2.5]))])
        step(sys, hist, cfg)
        np.testing.assert_allclose(sys.y, [1.1, 1.5], atol=1e-12)

    def test_viscosity_holds(self):
        cfg = SolverConfig(scheme="momentumless_bdf2", time_step=0.1, grad_tol=1e-12)
        sys = PotentialSystem(_zero, [1.0, -1.0], viscosity=3.0)
        hist = History([(sys.params, np.array([1.0, -1.0])), (sys.params, np.array([1.0, -1.0]))])
        step(sys, hist, cfg)
        np.testing.assert_allclose(sys.y, [1.0, -1.0], atol=1e-14)

    def test_objective_matches_stencils(self):
        cfg = SolverConfig(scheme="bdf2", time_step=0.2)
        sys = PotentialSystem(_quadratic([[2.0]], np.zeros(1)), [0.5], mass=3.0, viscosity=0.7)
        past = [0.4, 0.2, 0.1]
        hist = History([(sys.params, np.array([p])) for p in past])
        y = np.array([0.55])
        ev = dynamics_objective(sys, hist, y, cfg)
        h = 0.2
        v = (1.5 * y - 2 * past[0] + 0.5 * past[1]) / h
        a = (2 * y - 5 * past[0] + 4 * past[1] - past[2]) / h**2
        assert ev.grad[0] == pytest.approx(3.0 * a[0] + 0.7 * v[0] + 2.0 * y[0])

    @staticmethod
    def _oscillator_error(h, scheme, T=2.0):
        k, m = 4.0, 1.0
        cfg = SolverConfig(scheme=scheme, time_step=h, grad_tol=1e-13, warm_start=True)
        sys = PotentialSystem(_quadratic([[k]], np.zeros(1)), [1.0], mass=m)
        hist = History.start(sys, cfg)
        for _ in range(int(round(T / h))):
            step(sys, hist, cfg)
        return abs(sys.y[0] - np.cos(np.sqrt(k / m) * T))

    def test_oscillator_second_order(self):
        errs = [self._oscillator_error(h, "bdf2") for h in (0.02, 0.01, 0.005)]
        rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        np.testing.assert_allclose(rates, 2.0, atol=0.3)

    def test_oscillator_first_order(self):
        errs = [self._oscillator_error(h, "bdf1") for h in (0.01, 0.005, 0.0025)]
        rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        np.testing.assert_allclose(rates, 1.0, atol=0.3)

    def test_equilibrium_fixed_point(self):
        energy = EnergyModel([EnergyTerm("area_target", 1.0), EnergyTerm("site_centroid", 1.0)])
        st = SystemState([[0.25, 0.5, 0, 0.5], [0.75, 0.5, 0, 0.5]], (True, True, False, False),
                         BoundaryModel.fixed(PolygonDomain.rectangle(0, 0, 1, 1)), energy,
                         mass=(1.0, 1.0, 0, 0), viscosity=(0.1, 0.1, 0, 0))
        y0 = st.y.copy()
        for scheme in ("bdf1", "bdf2", "momentumless_bdf1", "momentumless_bdf2", "quasistatic"):
            cfg = SolverConfig(scheme=scheme, time_step=0.05)
            hist = History.at_rest(st, cfg.history_depth)
            res = step(st, hist, cfg)
            assert res.converged
            np.testing.assert_allclose(st.y, y0, atol=1e-14)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(4)
            n = 12
            energy = EnergyModel([EnergyTerm("area_target", 1.0), EnergyTerm("perimeter", 0.05),
                                  EnergyTerm("site_centroid", 1.0)])
            st = SystemState(np.c_[rng.random((n, 2)), np.zeros(n), np.full(n, 1 / n)], (True, True, False, False),
                             BoundaryModel.fixed(PolygonDomain.rectangle(0, 0, 1, 1)), energy,
                             viscosity=(0.2, 0.2, 0, 0))
            cfg = SolverConfig(scheme="momentumless_bdf2", time_step=0.05)
            hist = History.start(st, cfg)
            out = []
            for _ in range(5):
                step(st, hist, cfg)
                out.append(st.y.copy())
            return np.array(out)

        assert run().tobytes() == run().tobytes()
