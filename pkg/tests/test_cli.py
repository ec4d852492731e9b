import json
import math
import shutil

import numpy as np
import pytest

from nightstereo.cli import main
from nightstereo.config import EFFECTIVE_CONFIG
from nightstereo.maps import DepthMap, save_depth_pgm, write_scale_sidecar
from nightstereo.reports import read_metrics_csv
from nightstereo.scenegen import open_dataset


@pytest.fixture
def config_file(tiny_config, tmp_path):
    path = tmp_path / "config.json"
    path.write_text(tiny_config.model_dump_json())
    return path


@pytest.fixture
def gt_sink(tiny_dataset, tmp_path):
    """A sink whose depth maps are the ground truth itself."""
    sink = tmp_path / "gt_sink"
    (sink / "depth").mkdir(parents=True)
    write_scale_sidecar(sink / "depth", 0.002, 0, "m")
    dataset = open_dataset(tiny_dataset)
    for frame in dataset.frames:
        save_depth_pgm(sink / "depth" / f"{frame:06d}.pgm", dataset.gt_depth(frame), 0.002)
    return sink


class TestGenerate:
    def test_small_dataset(self, tmp_path, capsys, tiny_calib):
        config = tmp_path / "gen.json"
        config.write_text(json.dumps({"generate": {
            "trajectory": {"frames": 2},
            "calibration": tiny_calib.model_dump(),
        }}))
        out = tmp_path / "data"
        assert main(["generate", "--config", str(config), "--out", str(out), "--seed", "2"]) == 0
        assert (out / "manifest.json").is_file()
        assert json.loads((out / EFFECTIVE_CONFIG).read_text())["seed"] == 2
        assert str(out / "manifest.json") in capsys.readouterr().out
        assert len(open_dataset(out)) == 2

    def test_unwritable_output(self, tmp_path, capsys):
        (tmp_path / "file").write_text("")
        assert main(["generate", "--out", str(tmp_path / "file" / "data")]) == 2
        assert capsys.readouterr().err.startswith("IoFailure:")

    def test_missing_config(self, tmp_path, capsys):
        assert main(["generate", "--config", str(tmp_path / "nope.json")]) == 2
        assert "nope.json" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"stereo": {"window": 1}}))
        assert main(["generate", "--config", str(config)]) == 2
        assert capsys.readouterr().err.startswith("ConfigError:")


class TestRunAndEval:
    def test_run_then_eval_seg_and_keypoints(self, config_file, tiny_dataset, tmp_path):
        sink = tmp_path / "night"
        assert main(["run", "--config", str(config_file), "--condition", "night", "--out", str(sink)]) == 0
        assert (sink / "latency.csv").is_file()
        assert json.loads((sink / EFFECTIVE_CONFIG).read_text())["condition"] == "night"

        out = tmp_path / "eval"
        assert main(["eval", "seg", "--config", str(config_file), "--gt", str(tiny_dataset),
                     "--night", str(sink), "--out", str(out)]) == 0
        rows = read_metrics_csv(out / "eval_seg.csv")
        assert [r.name for r in rows] == ["000000", "000001", "000002", "summary"]
        assert 0.0 <= rows[-1]["night"] <= 1.0

        assert main(["eval", "keypoints", "--config", str(config_file), "--gt", str(tiny_dataset),
                     "--enhanced", str(sink), "--out", str(out)]) == 0
        rows = read_metrics_csv(out / "eval_keypoints.csv")
        assert len(rows) == 4
        assert rows[0]["delta"] == rows[0]["enhanced"] - rows[0]["night"]

    def test_eval_depth_of_ground_truth(self, config_file, tiny_dataset, gt_sink, tmp_path):
        out = tmp_path / "eval"
        args = ["eval", "depth", "--config", str(config_file), "--gt", str(tiny_dataset),
                "--night", str(gt_sink), "--enhanced", str(gt_sink), "--out", str(out)]
        assert main(args) == 0
        summary = read_metrics_csv(out / "eval_depth.csv")[-1]
        assert summary.name == "summary"
        assert summary["night_mae"] == 0.0
        assert summary["enhanced_valid_fraction"] == 1.0
        assert summary["reduction_pct"] == 0.0
        assert main(args + ["--check"]) == 1

    def test_eval_depth_frame_without_overlap(self, config_file, tiny_dataset, gt_sink, tmp_path):
        night = tmp_path / "night"
        shutil.copytree(gt_sink, night)
        blank = DepthMap(np.full(open_dataset(tiny_dataset).gt_depth(1).shape, -1.0))
        save_depth_pgm(night / "depth" / "000001.pgm", blank, 0.002)
        out = tmp_path / "eval"
        assert main(["eval", "depth", "--config", str(config_file), "--gt", str(tiny_dataset),
                     "--night", str(night), "--enhanced", str(gt_sink), "--out", str(out)]) == 0
        rows = read_metrics_csv(out / "eval_depth.csv")
        assert rows[1]["night_valid_fraction"] == 0.0
        assert math.isnan(rows[1]["night_mae"])
        summary = rows[-1]
        assert summary["night_mae"] == 0.0
        assert summary["night_valid_fraction"] == pytest.approx(2 / 3)
        assert summary["enhanced_valid_fraction"] == 1.0

    def test_eval_vo_of_ground_truth(self, config_file, tiny_dataset, tmp_path):
        out = tmp_path / "eval"
        assert main(["eval", "vo", "--config", str(config_file), "--gt", str(tiny_dataset),
                     "--night", str(tiny_dataset / "gt" / "poses.txt"), "--out", str(out)]) == 0
        rows = read_metrics_csv(out / "eval_vo.csv")
        assert [r.name for r in rows] == ["night"]
        assert rows[0]["mean_error"] == 0.0
        assert rows[0]["endpoint_error"] == 0.0
        assert rows[0]["path_length"] == pytest.approx(1.0)

    def test_vo_check_needs_both_conditions(self, config_file, tiny_dataset, tmp_path, capsys):
        assert main(["eval", "vo", "--config", str(config_file), "--gt", str(tiny_dataset),
                     "--night", str(tiny_dataset), "--out", str(tmp_path / "eval"), "--check"]) == 2
        assert capsys.readouterr().err.startswith("MissingInput:")

    def test_missing_inputs(self, config_file, tiny_dataset, tmp_path, capsys):
        assert main(["eval", "depth", "--config", str(config_file), "--gt", str(tiny_dataset)]) == 2
        assert main(["eval", "keypoints", "--config", str(config_file), "--enhanced", str(tmp_path)]) == 2
        assert main(["eval", "seg", "--config", str(config_file), "--gt", str(tiny_dataset),
                     "--night", str(tmp_path / "absent")]) == 2
        assert capsys.readouterr().err.count("MissingInput:") == 3
