"""CLI subcommand smoke tests, artifacts, and exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from sceneflow.cli import main, parse_config_file

TINY_NET = {
    "n_points": 64, "down_ratios": "4,2,2", "k": 4, "ta_cap": 4,
    "spatial_width": 8, "temporal_width": 8, "encoder_widths": "8,8",
    "upconv_width": 8, "pointwise_width": 8, "radius2": 1.0,
}


def write_config(path, values):
    path.write_text("".join(f"{k}={v}\n" for k, v in values.items()))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated pairs + a trained tiny flow checkpoint shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    pairs_cfg = write_config(root / "pairs.cfg", {
        **TINY_NET, "pairs": 3, "points_per_scene": 600, "motion_scale": 0.3,
    })
    assert main(["gen-pairs", "--seed", "1", "--config", pairs_cfg,
                 "--out", str(root / "pairs")]) == 0
    train_cfg = write_config(root / "train.cfg", {
        **TINY_NET, "epochs": 1, "batch_size": 2,
    })
    assert main(["train", "--task", "flow", "--seed", "2",
                 "--config", train_cfg,
                 "--data", str(root / "pairs" / "pairs.manifest"),
                 "--out", str(root / "model")]) == 0
    return root


class TestConfigParsing:
    def test_key_value_and_comments(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\nalpha = 3\n\nbeta=x,y\n")
        assert parse_config_file(p) == {"alpha": "3", "beta": "x,y"}

    def test_missing_equals_is_error(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("garbage\n")
        from sceneflow.errors import SceneFlowError
        with pytest.raises(SceneFlowError):
            parse_config_file(p)


class TestGenScenes:
    def test_writes_scenes_and_manifest(self, tmp_path):
        cfg = write_config(tmp_path / "c.cfg",
                           {"scenes": 2, "points_per_scene": 200})
        assert main(["gen-scenes", "--seed", "3", "--config", cfg,
                     "--out", str(tmp_path / "scenes")]) == 0
        assert (tmp_path / "scenes" / "scenes.manifest").exists()
        assert (tmp_path / "scenes" / "scene_0000.txt").exists()
        assert (tmp_path / "scenes" / "scene_0001.txt").exists()


class TestTrainEval:
    def test_artifacts_exist(self, workspace):
        assert (workspace / "model" / "checkpoint.bin").exists()
        log = json.loads((workspace / "model" / "train_log.json").read_text())
        assert log["kind"] == "train"
        assert log["config"]["task"] == "flow"

    def test_eval_writes_report_and_csv(self, workspace, tmp_path):
        rc = main(["eval", "--seed", "4",
                   "--checkpoint", str(workspace / "model" / "checkpoint.bin"),
                   "--data", str(workspace / "pairs" / "pairs.manifest"),
                   "--out", str(tmp_path)])
        assert rc == 0
        report = json.loads((tmp_path / "eval_report.json").read_text())
        assert {"model", "zero_flow_baseline", "pair_count"} <= set(report["metrics"])
        assert (tmp_path / "eval_report.csv").exists()

    def test_eval_requires_inputs(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path)]) == 1

    def test_eval_rejects_seg_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path / "c.cfg", {
            "epochs": 1, "scenes": 2, "n_points": 48, "num_classes": 6,
            "points_per_scene": 200, "k": 4,
        })
        assert main(["train", "--task", "segmentation", "--seed", "5",
                     "--config", cfg, "--out", str(tmp_path / "seg")]) == 0
        rc = main(["eval", "--seed", "0",
                   "--checkpoint", str(tmp_path / "seg" / "checkpoint.bin"),
                   "--data", "whatever", "--out", str(tmp_path)])
        assert rc == 1

    def test_flow_train_requires_data(self, tmp_path):
        assert main(["train", "--task", "flow", "--out", str(tmp_path)]) == 1

    def test_missing_config_file_is_failure(self, tmp_path):
        assert main(["gen-scenes", "--config", str(tmp_path / "absent.cfg"),
                     "--out", str(tmp_path)]) == 1


class TestFlowCurve:
    def test_writes_bins(self, workspace, tmp_path):
        cfg = write_config(tmp_path / "c.cfg", {"bin_edges": "0.0,0.2,0.6"})
        rc = main(["flow-curve", "--seed", "6", "--config", cfg,
                   "--checkpoint", str(workspace / "model" / "checkpoint.bin"),
                   "--data", str(workspace / "pairs" / "pairs.manifest"),
                   "--out", str(tmp_path)])
        assert rc == 0
        report = json.loads((tmp_path / "flow_curve.json").read_text())
        assert len(report["metrics"]["bins"]) == 2


class TestStability:
    def test_tiny_run(self, tmp_path):
        cfg = write_config(tmp_path / "c.cfg", {
            "scenes": 2, "n_grid": "64,128", "resamples": 3, "down_to": 16,
            "k": 8, "points_per_scene": 400,
        })
        rc = main(["stability", "--seed", "7", "--config", cfg,
                   "--out", str(tmp_path)])
        assert rc == 0
        report = json.loads((tmp_path / "stability_report.json").read_text())
        methods = report["metrics"]["methods"]
        assert set(methods) == {"fps", "attention"}
        csv_text = (tmp_path / "stability_report.csv").read_text()
        assert csv_text.startswith("n,method,avg_pairwise_chamfer")


class TestGradcheck:
    def test_passes_and_prints(self, capsys):
        assert main(["gradcheck", "--seed", "7"]) == 0
        out = capsys.readouterr().out
        assert "max relative gradient error" in out


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self):
        proc = subprocess.run(
            [sys.executable, "-m", "sceneflow.cli", "gradcheck", "--bogus-flag"],
            capture_output=True, text=True)
        assert proc.returncode == 2
        assert "--bogus-flag" in proc.stderr

    def test_unknown_subcommand_is_usage_error(self):
        proc = subprocess.run(
            [sys.executable, "-m", "sceneflow.cli", "frobnicate"],
            capture_output=True, text=True)
        assert proc.returncode == 2

    def test_version_flag(self):
        proc = subprocess.run(
            [sys.executable, "-m", "sceneflow.cli", "--version"],
            capture_output=True, text=True)
        assert proc.returncode == 0
        import sceneflow
        assert sceneflow.__version__ in proc.stdout
