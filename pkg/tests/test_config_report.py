import json

import numpy as np
import pytest

from powercell import config as cfgmod
from powercell import report
from powercell.render import FrameSchemaError, frame_svg, id_color, scalar_field, validate_frame


class TestConfig:
    @pytest.mark.parametrize("name", cfgmod.preset_names())
    def test_presets_load(self, name):
        cfg = cfgmod.load(preset=name)
        assert cfg["scenario"]["name"] == name

    def test_ini_and_json_agree(self, tmp_path):
        (tmp_path / "a.ini").write_text("[scenario]\nframes = 3\n[solver]\nwarm_start = no\ngrad_tol = 1e-9\n")
        (tmp_path / "a.json").write_text(json.dumps({"scenario": {"frames": 3},
                                                     "solver": {"warm_start": False, "grad_tol": 1e-9}}))
        assert cfgmod.load(str(tmp_path / "a.ini")) == cfgmod.load(str(tmp_path / "a.json"))

    def test_overrides(self):
        cfg = cfgmod.load(preset="two_cells", overrides=["scenario.frames=7", "energy.perimeter = 0.5"])
        assert cfg["scenario"]["frames"] == 7 and cfg["energy"]["perimeter"] == 0.5

    @pytest.mark.parametrize("bad", ["scenario.frames=2.5", "scenario.frames=x", "solver.warm_start=maybe",
                                     "nosuch.key=1", "scenario.nosuch=1", "frames=3", "scenario.frames"])
    def test_rejects(self, bad):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load(preset="two_cells", overrides=[bad])

    def test_missing_file(self, tmp_path):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load(str(tmp_path / "none.ini"))

    def test_source_xor_preset(self):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load()

    def test_vectors(self):
        assert cfgmod.vector("1, 2; 3") == [1.0, 2.0, 3.0]
        assert cfgmod.points("0,1; 2,3") == [[0.0, 1.0], [2.0, 3.0]]
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.vector("1,2", 3)
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.points("1,2,3")


class TestReport:
    def test_float_round_trip(self):
        vals = [0.1, 1 / 3, 2.0, 1e-300, -7.25e17, np.float64(np.pi)]
        text = report.dumps({"v": vals})
        back = json.loads(text)["v"]
        assert back == [float(v) for v in vals]
        assert all(isinstance(v, float) for v in back)
        assert "2.0" in text

    def test_non_finite_null(self):
        assert json.loads(report.dumps([np.nan, np.inf, 1])) == [None, None, 1]

    def test_deterministic(self):
        obj = {"b": [1, 2.5], "a": {"x": np.arange(3)}}
        assert report.dumps(obj) == report.dumps(obj)
        assert json.loads(report.dumps(obj)) == {"b": [1, 2.5], "a": {"x": [0, 1, 2]}}

    def test_csv(self, tmp_path):
        report.write_csv(tmp_path / "t.csv", [{"a": 1, "b": 0.5, "c": None}, {"a": True, "b": 2.0}])
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines == ["a,b,c", "1,0.5,", "1,2.0,"]

    def test_plots(self, tmp_path):
        report.plot_bench([10, 100], [0.1, 1.0], tmp_path / "b.png")
        report.plot_convergence([0.1, 0.05], [1e-2, 2.5e-3], 2.0, tmp_path / "c.png")
        assert (tmp_path / "b.png").stat().st_size > 0 and (tmp_path / "c.png").stat().st_size > 0


def _frame():
    sq = [[0, 0], [1, 0], [1, 1], [0, 1]]
    return {"schema_version": 1, "boundary": [sq],
            "cells": [{"id": 4, "polygon": [sq], "site": [0.5, 0.5], "area": 1.0, "area_target": 0.5}]}


class TestRenderPieces:
    def test_svg_deterministic(self):
        assert frame_svg(_frame()) == frame_svg(_frame())
        assert 'data-id="4"' in frame_svg(_frame())

    def test_id_color_stable(self):
        assert id_color(4) == id_color(4) != id_color(5)

    def test_fields(self):
        assert scalar_field(_frame(), "area_error")[0] == pytest.approx(1.0)
        assert scalar_field(_frame(), "pressure", 2.0)[0] == pytest.approx(2 * 2.0 * (1 - 2.0) / 0.5)
        with pytest.raises(ValueError):
            scalar_field(_frame(), "temperature")

    def test_schema_errors(self):
        f = _frame()
        del f["boundary"]
        with pytest.raises(FrameSchemaError):
            validate_frame(f, 3)
        with pytest.raises(FrameSchemaError, match="frame 3"):
            validate_frame({"schema_version": 2}, 3)
