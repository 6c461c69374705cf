import numpy as np
import pytest

from powercell import config as cfgmod
from powercell import scene
from powercell.boundary import BoundaryModel
from powercell.diagram import PolygonDomain
from powercell.energy import EnergyModel, EnergyTerm
from powercell.scene import DivisionRule, apply_divisions, collapse_sweep, divide
from powercell.solve import History
from powercell.system import SystemState

UNIT = PolygonDomain.rectangle(0, 0, 1, 1)


class TestDivide:
    def test_horizontal(self):
        a, b, _ = divide([0, 0, 0.3, 1.0], (1, 0), DivisionRule(beta=0.1))
        np.testing.assert_allclose(a[:2], [0.1, 0.0])
        np.testing.assert_allclose(b[:2], [-0.1, 0.0])
        assert a[2] == b[2] == 0.3

    def test_scaled_offset(self):
        a, b, _ = divide([0, 0, 0, 4.0], (0, 1), DivisionRule(beta=0.1))
        np.testing.assert_allclose(a[:2], [0.0, 0.2])
        np.testing.assert_allclose(b[:2], [0.0, -0.2])

    def test_rest_area_conserved(self):
        a, b, _ = divide([0.2, 0.1, 0, 0.37], (0.6, 0.8), DivisionRule())
        assert a[3] + b[3] == 0.37
        assert a[3] == b[3]

    def test_rule_validation(self):
        with pytest.raises(ValueError):
            DivisionRule(beta=0.0)
        with pytest.raises(ValueError):
            DivisionRule(gamma=0.5)
        with pytest.raises(ValueError):
            divide([0, 0, 0, np.nan], (1, 0), DivisionRule())
        assert DivisionRule(alpha=100.0).probability(1.0, 1.0) == 1.0

    def test_history_shifted_with_daughters(self):
        st = SystemState([[0.3, 0.5, 0, 0.5], [0.7, 0.5, 0, 0.5]], (True, True, False, False),
                         BoundaryModel.fixed(UNIT), EnergyModel([EnergyTerm("area_target", 1.0)]))
        hist = History([(st.params.copy(), st.p.copy()), (st.params + [0.01, 0, 0, 0], st.p.copy())])
        ev = apply_divisions(st, hist, [0], DivisionRule(beta=0.1), np.random.default_rng(0), {}, {}, 0.0)
        assert st.n_sites == 3 and len(ev) == 1
        assert list(st.ids) == [1, 2, 3]
        for p, _ in hist.entries:
            assert p.shape == st.params.shape
        # the older entry keeps the parent's offset in both daughters
        np.testing.assert_allclose(hist.entries[1][0][1:, 0] - st.params[1:, 0], 0.01)
        assert len(st.y) == st.n_dofs == 6


class TestCollapse:
    def _state(self, params):
        return SystemState(params, (True, True, False, False), BoundaryModel.fixed(UNIT),
                           EnergyModel([EnergyTerm("area_target", 1.0)]))

    def test_nothing_below_threshold(self):
        st = self._state([[0.25, 0.5, 0, 0.5], [0.75, 0.5, 0, 0.5]])
        before = st.params.copy()
        removed, area = collapse_sweep(st, None, 1e-9)
        assert removed == [] and area == 0.0
        np.testing.assert_array_equal(st.params, before)

    def test_empty_cell_removed(self):
        st = self._state([[0.25, 0.5, 0.5, 0.3], [0.75, 0.5, 0.5, 0.3], [0.5, 0.5, -1.0, 0.4]])
        hist = History.at_rest(st, 2)
        removed, area = collapse_sweep(st, hist, 1e-9)
        assert removed == [2] and area == pytest.approx(0.4)
        assert st.n_sites == 2
        assert all(len(p) == 2 for p, _ in hist.entries)
        d = st.diagram_at()[0]
        assert d.cell_areas().sum() == pytest.approx(1.0, rel=1e-12)


def _cfg(preset, *overrides):
    return cfgmod.load(preset=preset, overrides=list(overrides))


class TestScenarios:
    def test_two_cells(self):
        log = scene.run(_cfg("two_cells"))
        assert len(log.frames) == 2
        assert log.frames[-1]["converged"]
        assert log.frames[-1]["tiling_error"] < 1e-12

    def test_rigid_asymmetric_curves(self):
        sim = scene.Simulation(_cfg("rigid_navigation"))
        sim.run()
        tx, ty, _ = sim.state.p
        assert tx > 0.1
        assert abs(ty) > 1e-3

    def test_rigid_symmetric_on_axis(self):
        sim = scene.Simulation(_cfg("rigid_symmetric"))
        sim.run()
        tx, ty, ang = sim.state.p
        assert tx > 0.1
        assert abs(ty) < 1e-10 and abs(ang) < 1e-10

    def test_probabilistic_reproducible(self):
        def run():
            frames = []
            log = scene.run(_cfg("proliferation", "scenario.frames=12"), frames.append)
            return log, frames

        (la, fa), (lb, fb) = run(), run()
        assert [e for e in la.events if e["kind"] == "division"]
        assert la.events == lb.events
        assert [f["dofs"] for f in fa] == [f["dofs"] for f in fb]

    def test_bookkeeping_every_frame(self):
        def check(rec):
            n = len(rec["cells"])
            assert len(rec["dofs"]) == len(rec["layout"])
            ids = {c["id"] for c in rec["cells"]}
            assert len(ids) == n
            assert rec["tiling_error"] < 1e-9

        sim = scene.Simulation(_cfg("proliferation", "scenario.frames=12"))
        log = sim.run(check)
        st = sim.state
        assert len(st.y) == st.n_dofs
        assert all(p.shape == st.params.shape for p, _ in sim.history.entries)
        for e in log.events:
            if e["kind"] == "division":
                assert sum(e["daughter_area_targets"]) == e["area_target"]

    def test_membrane_growth_prefix(self):
        log = scene.run(_cfg("membrane_growth", "scenario.frames=25"))
        cells = [r["cells"] for r in log.frames]
        assert cells[0] == 1 and cells[12] == 2 and cells[24] == 4
        totals = [r["total_area_target"] for r in log.frames]
        assert totals[11] == totals[12] == totals[24]

    def test_failure_carries_frame(self):
        with pytest.raises(scene.SimulationFailure) as exc:
            scene.run(_cfg("squeeze30", "solver.max_iters=1"))
        assert exc.value.frame == 1

    def test_unknown_preset(self):
        with pytest.raises(cfgmod.ConfigError):
            _cfg("no_such_preset")

    def test_convergence_study_small(self):
        cfg = _cfg("convergence_bdf2", "convergence.halvings=2", "convergence.reference_halvings=4")
        res = scene.convergence_study(cfg)
        assert res.topology_changes >= 1
        assert np.all(np.diff(res.errors) < 0)
