import json
import os

import pytest

import main
from config import SEED_ENV

TINY_CORPUS = ["--n-mask", "3", "--n-box", "8", "--size", "32", "--test-sets", "synth-standard:3",
               "--workers", "1"]
TINY_TRAIN = ["--epochs", "1", "--batch-size", "4", "--lr", "0.003", "--workers", "1"]


def _error(capsys) -> dict:
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


def _summary(run_dir) -> dict:
    with open(os.path.join(run_dir, "run_summary.json")) as handle:
        return json.load(handle)


def test_invalid_threshold_is_a_config_error(tmp_path, capsys):
    code = main.dispatch(["ffs", "--dice-threshold", "1.5", "--run-dir", str(tmp_path)])
    assert code == 3
    error = _error(capsys)
    assert error["error"] == "ParameterError"
    assert error["exit_code"] == 3
    assert not os.path.exists(tmp_path / "ledger.sqlite")


def test_image_size_off_the_pooling_grid_is_a_config_error(tmp_path, capsys):
    code = main.dispatch(["synth", "--run-dir", str(tmp_path), "--size", "34", "--n-mask", "1", "--n-box", "1"])
    assert code == 3
    error = _error(capsys)
    assert error["error"] == "ParameterError"
    assert "multiple of 4" in error["message"]


@pytest.mark.parametrize("argv", [["synth", "--frobnicate"], [], ["train"], ["pretrain", "--arch", "C"]])
def test_usage_errors(argv, capsys):
    assert main.dispatch(argv) == 2
    assert _error(capsys)["error"] == "UsageError"


def test_missing_manifest_is_a_data_error(tmp_path, capsys):
    code = main.dispatch(["pretrain", "--manifest", str(tmp_path / "absent.json"), "--run-dir", str(tmp_path)])
    assert code == 4
    assert _error(capsys)["exit_code"] == 4


def test_stage_without_upstream_run(tmp_path, capsys):
    assert main.dispatch(["pretrain", "--run-dir", str(tmp_path)]) == 4
    assert "synth" in _error(capsys)["message"]


def test_bad_seed_list(tmp_path, capsys):
    assert main.dispatch(["ablate", "--seeds", "1,x", "--run-dir", str(tmp_path), *TINY_CORPUS]) == 3


@pytest.mark.parametrize("command, expected", [("ffs", "0.7"), ("ffs", "0.5"), ("pretrain", "0.0001"),
                                               ("ablate", "0.001"), ("ablate", "True")])
def test_help_lists_defaults(command, expected, capsys):
    assert main.dispatch([command, "--help"]) == 0
    assert f"(default: {expected})" in " ".join(capsys.readouterr().out.split())


def test_stage_by_stage(tmp_path):
    run_dir = str(tmp_path / "run")
    common = ["--run-dir", run_dir]
    assert main.dispatch(["synth", *common, *TINY_CORPUS, "--audit"]) == 0
    audit = _summary(run_dir)["metrics"]["audit"]
    assert "clean" in audit
    assert set(audit) <= {"clean", "blur", "no_polyp", "wrong_label", "imprecise_box"}
    assert main.dispatch(["pretrain", *common, *TINY_TRAIN]) == 0
    assert main.dispatch(["predict", *common, "--workers", "1"]) == 0
    assert main.dispatch(["ffs", *common, "--dice-threshold", "0", "--binarize-threshold", "0",
                          "--workers", "1"]) == 0
    assert _summary(run_dir)["metrics"]["kept"] == 8
    assert main.dispatch(["boost", *common, *TINY_TRAIN]) == 0
    assert main.dispatch(["eval", *common, "--workers", "1"]) == 0

    summary = _summary(run_dir)
    assert set(summary["metrics"]) == {"A", "B"}
    assert summary["config"]["command"] == "eval"
    assert any(path.endswith("metrics.csv") for path in summary["artifacts"])

    assert main.dispatch(["curve", *common, "--points", "5", "--workers", "1"]) == 0
    with open(os.path.join(run_dir, "curves", "synth-standard.csv")) as handle:
        assert len(handle.read().splitlines()) == 6


def test_config_replay_reproduces_the_corpus(tmp_path):
    first, second = str(tmp_path / "first"), str(tmp_path / "second")
    assert main.dispatch(["synth", "--run-dir", first, "--seed", "9", *TINY_CORPUS]) == 0
    replay = os.path.join(first, "run_summary.json")
    assert main.dispatch(["synth", "--config", replay, "--run-dir", second]) == 0

    one, two = _summary(first), _summary(second)
    assert two["config"]["seed"] == 9
    assert two["config"]["run_dir"] == second
    assert {k: v for k, v in one["config"].items() if k != "run_dir"} == \
        {k: v for k, v in two["config"].items() if k != "run_dir"}
    assert one["artifacts"] == two["artifacts"]


def test_config_with_unknown_keys(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"config": {"command": "synth", "polyp_count": 3}}))
    assert main.dispatch(["synth", "--config", str(path), "--run-dir", str(tmp_path / "run")]) == 3
    assert "polyp_count" in _error(capsys)["message"]


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "42")
    run_dir = str(tmp_path / "run")
    assert main.dispatch(["synth", "--run-dir", run_dir, *TINY_CORPUS]) == 0
    assert _summary(run_dir)["config"]["seed"] == 42
    assert main.dispatch(["synth", "--run-dir", str(tmp_path / "flag"), "--seed", "5", *TINY_CORPUS]) == 0
    assert _summary(str(tmp_path / "flag"))["config"]["seed"] == 5
