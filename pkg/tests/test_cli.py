from __future__ import annotations

import json

import numpy as np
import pytest

from roadfusion.cli import main
from roadfusion.synth import SceneSpec, generate_scene, write_scene


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    spec = SceneSpec(seed=11, extent=20.0, lane_width=3.0, lanes_per_side=1,
                     frames=2, density_ref=60.0, divider_paint_width=0.25)
    out = tmp_path_factory.mktemp("cliscene") / "s"
    write_scene(generate_scene(spec), out)
    return out


def run_cli(*args):
    return main([str(a) for a in args])


class TestSynthCommand:
    def test_writes_scene(self, tmp_path):
        rc = run_cli("synth", "--out", tmp_path / "s", "--seed", 3,
                     "--extent", 20, "--num-frames", 2, "--density", 20)
        assert rc == 0
        assert (tmp_path / "s" / "gt.geojson").exists()
        assert len(list((tmp_path / "s" / "frames").glob("*.rspc"))) == 2

    def test_spec_file(self, tmp_path):
        spec = SceneSpec(seed=5, extent=20.0, frames=1, density_ref=15.0)
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec.to_json_dict()))
        rc = run_cli("synth", "--out", tmp_path / "s", "--spec", spec_path)
        assert rc == 0
        written = json.loads((tmp_path / "s" / "spec.json").read_text())
        assert written["seed"] == 5

    def test_invalid_spec_exit_code(self, tmp_path):
        rc = run_cli("synth", "--out", tmp_path / "s", "--extent", 1)
        assert rc == 2


class TestStageCommands:
    def test_ground_raster_chain(self, scene_dir, tmp_path):
        rc = run_cli("ground", "--cloud", scene_dir / "frames" / "000.rspc",
                     "--out-ground", tmp_path / "g.xyz",
                     "--out-nonground", tmp_path / "ng.xyz",
                     "--out-plane", tmp_path / "plane.json")
        assert rc == 0
        plane = json.loads((tmp_path / "plane.json").read_text())
        assert abs(plane["normal"][2]) > 0.99
        rc = run_cli("raster", "--ground", tmp_path / "g.xyz",
                     "--out", tmp_path / "i.png",
                     "--out-seg", tmp_path / "seg.png",
                     "--grid-cell", 0.1)
        assert rc == 0
        assert (tmp_path / "i.png").exists() and (tmp_path / "i.json").exists()
        assert (tmp_path / "seg.png").exists()

    def test_ground_missing_cloud(self, tmp_path):
        rc = run_cli("ground", "--cloud", tmp_path / "nope.rspc",
                     "--out-ground", tmp_path / "g.xyz")
        assert rc == 2

    def test_fuse_then_vectorize_matches_pipeline(self, scene_dir, tmp_path):
        common = ["--grid-cell", 0.1, "--seed", 0]
        rc = run_cli("fuse", "--scene", scene_dir, "--out-dir", tmp_path / "fused", *common)
        assert rc == 0
        rc = run_cli("vectorize", "--points", tmp_path / "fused" / "labeled_multimodal.xyzc",
                     "--out", tmp_path / "map.geojson", *common)
        assert rc == 0
        rc = run_cli("pipeline", "--scene", scene_dir, "--out-dir", tmp_path / "out", *common)
        assert rc == 0
        staged = json.loads((tmp_path / "map.geojson").read_text())
        direct = json.loads((tmp_path / "out" / "map_multimodal.geojson").read_text())
        assert staged == direct


class TestEvalCommand:
    def test_eval_prints_miou_last(self, scene_dir, tmp_path, capsys):
        rc = run_cli("pipeline", "--scene", scene_dir, "--out-dir", tmp_path / "out",
                     "--grid-cell", 0.1)
        assert rc == 0
        capsys.readouterr()
        rc = run_cli("eval", "--pred", tmp_path / "out" / "map_multimodal.geojson",
                     "--gt", scene_dir / "gt.geojson",
                     "--out-dir", tmp_path / "eval")
        assert rc == 0
        out = capsys.readouterr().out
        last = out.strip().splitlines()[-1]
        value = float(last)
        assert 0.0 <= value <= 1.0
        assert (tmp_path / "eval" / "report.json").exists()
        assert (tmp_path / "eval" / "report.txt").exists()

    def test_missing_pred_is_input_error(self, scene_dir, tmp_path):
        rc = run_cli("eval", "--pred", tmp_path / "nope.geojson",
                     "--gt", scene_dir / "gt.geojson")
        assert rc == 2


class TestPipelineCommand:
    def test_missing_calib_exit_2(self, tmp_path):
        (tmp_path / "empty").mkdir()
        rc = run_cli("pipeline", "--scene", tmp_path / "empty", "--out-dir", tmp_path / "o")
        assert rc == 2

    def test_figures_written(self, scene_dir, tmp_path):
        rc = run_cli("pipeline", "--scene", scene_dir, "--out-dir", tmp_path / "out",
                     "--grid-cell", 0.1)
        assert rc == 0
        assert (tmp_path / "out" / "map_multimodal.svg").exists()
        assert (tmp_path / "out" / "maps_overview.svg").exists()
        assert (tmp_path / "out" / "report.svg").exists()

    def test_config_file_and_bad_key(self, scene_dir, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("grid_cell = 0.1\n")
        rc = run_cli("pipeline", "--scene", scene_dir, "--out-dir", tmp_path / "o1",
                     "--config", cfg)
        assert rc == 0
        cfg.write_text("grid_cel = 0.1\n")
        rc = run_cli("pipeline", "--scene", scene_dir, "--out-dir", tmp_path / "o2",
                     "--config", cfg)
        assert rc == 3

    def test_scene_without_gt_exit_0(self, scene_dir, tmp_path):
        import shutil
        nogt = tmp_path / "nogt"
        shutil.copytree(scene_dir, nogt)
        (nogt / "gt.geojson").unlink()
        rc = run_cli("pipeline", "--scene", nogt, "--out-dir", tmp_path / "out",
                     "--grid-cell", 0.1)
        assert rc == 0
        assert not (tmp_path / "out" / "report.json").exists()


class TestSweepAndDensityCommands:
    def test_sweep(self, scene_dir, tmp_path, capsys):
        rc = run_cli("sweep-frames", "--scene", scene_dir, "--ks", "1,2",
                     "--out-dir", tmp_path / "sweep", "--grid-cell", 0.1)
        assert rc == 0
        assert (tmp_path / "sweep" / "sweep.csv").exists()
        assert (tmp_path / "sweep" / "sweep.svg").exists()
        out = capsys.readouterr().out
        assert "frames" in out

    def test_density(self, scene_dir, tmp_path, capsys):
        rc = run_cli("density", "--scene", scene_dir,
                     "--bins", "5,15,25",
                     "--out-dir", tmp_path / "density", "--grid-cell", 0.1)
        assert rc == 0
        assert (tmp_path / "density" / "density.csv").exists()
        out = capsys.readouterr().out
        assert "distance" in out
