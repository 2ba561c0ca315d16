import csv
import json
import math

import numpy as np
import pytest

from xairefine import harness
from xairefine.cli import main
from xairefine.config import DEFAULTS, config_from_dict, parse_config
from xairefine.errors import ConfigError

SMALL = {
    "seed": 3,
    "data": {"d": 16, "core_indices": [0, 1, 2, 3], "spurious_indices": [4, 5],
             "n_train": 300, "n_test": 200, "n_val": 100},
    "model": {"hidden": [8], "epochs": 3},
    "refinement": {"max_iters": 1, "epochs_per_iter": 2, "calibration_size": 16,
                   "lime_repeats": 2, "alignment_points": 4},
    "attacks": {"fgsm_eps": [0.04, 0.12], "pgd_eps": [0.04, 0.12], "pgd_steps": 3},
    "corruption": {"severities": [1, 2]},
    "certifier": {"n_points": 5, "resolution": 0.01},
}


def small(**patch):
    cfg = json.loads(json.dumps(SMALL))
    for section, values in patch.items():
        if isinstance(values, dict):
            cfg.setdefault(section, {}).update(values)
        else:
            cfg[section] = values
    return cfg


@pytest.fixture(scope="module")
def small_report():
    return harness.run_experiment(config_from_dict(small()))


class TestConfig:
    def test_minimal_echo(self):
        assert config_from_dict({"seed": 0}).echo() == DEFAULTS

    def test_negative_lambda(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"refinement": {"lambda": -1.0}})
        assert info.value.key == "refinement.lambda"
        assert "refinement.lambda" in str(info.value)

    def test_unsorted_eps(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"attacks": {"fgsm_eps": [0.1, 0.05]}})
        assert info.value.key == "attacks.fgsm_eps"

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"model": {"depth": 3}})
        assert info.value.key == "model.depth"

    def test_type_errors(self):
        with pytest.raises(ConfigError):
            config_from_dict({"seed": "zero"})
        with pytest.raises(ConfigError):
            config_from_dict({"certifier": {"with_empirical": 1}})

    def test_blur_on_non_square(self):
        with pytest.raises(ConfigError):
            config_from_dict({"data": {"d": 10, "core_indices": [0], "spurious_indices": [1]}})

    def test_files(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("{seed: 0")
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "bad.json")
        (tmp_path / "ok.json").write_text('{"seed": 1}')
        assert parse_config(tmp_path / "ok.json", seed_override=9).seed == 9

    def test_stage_seeds_differ_and_are_stable(self):
        cfg = config_from_dict({"seed": 0})
        assert cfg.stage_seed("data") != cfg.stage_seed("init")
        assert cfg.stage_seed("data") == config_from_dict({"seed": 0}).stage_seed("data")
        assert cfg.stage_seed("data") != config_from_dict({"seed": 1}).stage_seed("data")


@pytest.mark.slow
class TestRunExperiment:
    def test_structure(self, small_report):
        r = small_report
        assert r["schema"] == 1 and r["complete"] and r["error"] is None
        for name in ("baseline", "refined"):
            for key in ("clean", "attacks", "detection", "corruption", "bounds", "bounds_masked"):
                assert key in r[name]
        assert len(r["refined"]["attacks"]) == 4
        assert "lambda_zero_control" in r["ablation"]
        assert r["wall_clock"] > 0

    def test_deterministic(self, small_report):
        again = harness.run_experiment(config_from_dict(small()))
        assert harness.report_bytes(again, False) == harness.report_bytes(small_report, False)

    def test_reproducible_from_echo(self, small_report):
        again = harness.run_experiment(config_from_dict(small_report["config"]))
        assert harness.report_bytes(again, False) == harness.report_bytes(small_report, False)

    def test_refinement_disabled(self):
        r = harness.run_experiment(config_from_dict(small(refinement={"max_iters": 0})))
        assert r["refined"] == r["baseline"]

    def test_stage_isolation(self, small_report):
        r = harness.run_experiment(config_from_dict(small(certifier={"enabled": False},
                                                          corruption={"enabled": False})))
        for name in ("baseline", "refined"):
            for key in ("clean", "attacks", "detection", "spurious_grad_sq"):
                assert r[name][key] == small_report[name][key]
        assert r["trace"] == small_report["trace"]

    def test_file_inputs(self, tmp_path):
        from xairefine import datagen
        cfg = config_from_dict(small())
        train, test, _, _ = harness.load_data(cfg)
        datagen.save_split(train, tmp_path / "train.txt")
        datagen.save_split(test, tmp_path / "test.txt")
        r = harness.run_experiment(config_from_dict(small(
            data={"train_path": str(tmp_path / "train.txt"), "test_path": str(tmp_path / "test.txt")},
            refinement={"reference": "robust", "reference_epochs": 2})))
        assert r["complete"]
        assert r["data"]["n_train"] + r["data"]["n_val"] == 300

    def test_oracle_needs_planted(self, tmp_path):
        from xairefine import datagen
        train, test, _, _ = harness.load_data(config_from_dict(small()))
        datagen.save_split(train, tmp_path / "a.txt")
        datagen.save_split(test, tmp_path / "b.txt")
        cfg = config_from_dict(small(data={"train_path": str(tmp_path / "a.txt"),
                                           "test_path": str(tmp_path / "b.txt")}))
        with pytest.raises(harness.ExperimentFailed) as info:
            harness.run_experiment(cfg)
        assert info.value.report["complete"] is False
        assert "reference" in info.value.report["error"]


class TestEmit:
    def test_files(self, small_report, tmp_path):
        paths = harness.emit_report(small_report, tmp_path / "report.json", tmp_path)
        back = json.loads((tmp_path / "report.json").read_text())
        assert back == small_report
        with open(paths["attack_sweep"]) as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["eps", "attack", "model", "accuracy"]
        assert len(rows) == 2 * 2 * 2
        for row in rows:
            assert math.isfinite(float(row["eps"])) and math.isfinite(float(row["accuracy"]))
        with open(paths["corruption_grid"]) as fh:
            grid = list(csv.DictReader(fh))
        assert len(grid) == 5 * 2 * 2
        assert all(math.isfinite(float(g["accuracy"])) for g in grid)

    def test_unwritable(self, small_report, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError) as info:
            harness.emit_report(small_report, blocker / "r.json", blocker)
        assert str(blocker) in str(info.value)


class TestCli:
    @pytest.fixture()
    def cfg_path(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(small(ablation={"lambda_zero_control": False})))
        return p

    def test_run(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg_path), "--out", str(out), "--threads", "2"]) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["config"]["threads"] == 2
        assert (out / "attack_sweep.csv").exists()
        assert (out / "checkpoints" / "model_iter1.json").exists()

    def test_subcommands(self, cfg_path, tmp_path):
        out = tmp_path / "o"
        assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
        model = str(out / "checkpoints" / "model_iter0.json")
        assert main(["explain", "--config", str(cfg_path), "--out", str(out),
                     "--model", model, "--indices", "0", "3"]) == 0
        att = json.loads((out / "attributions.json").read_text())["attributions"]
        assert [a["input_index"] for a in att] == [0, 3] and len(att[0]["beta"]) == 16
        assert main(["certify", "--config", str(cfg_path), "--out", str(out),
                     "--model", model, "--spurious", "4", "5"]) == 0
        assert (out / "bounds.json").exists()
        assert main(["attack-sweep", "--config", str(cfg_path), "--out", str(out),
                     "--model", model]) == 0
        lines = (out / "attack_sweep.csv").read_text().splitlines()
        assert lines[0] == "eps,attack,model,accuracy" and len(lines) == 6

    def test_config_error_exit(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text('{"refinement": {"lambda": -0.5}}')
        assert main(["run", "--config", str(p), "--out", str(tmp_path)]) == 2
        assert "refinement.lambda" in capsys.readouterr().err

    def test_usage_error_exit(self):
        assert main(["frobnicate"]) == 2

    def test_runtime_error_exit(self, cfg_path, tmp_path):
        (tmp_path / "broken.json").write_text('{"layers": []}')
        assert main(["certify", "--config", str(cfg_path), "--out", str(tmp_path),
                     "--model", str(tmp_path / "broken.json")]) == 3
