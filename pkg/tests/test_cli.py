from __future__ import annotations

import json
import subprocess
import sys

import pytest

from riskwatch.cli import COMMANDS, build_parser, main

SMALL = [f"--set={kv}" for kv in (
    "generator.n_instruments=3", "generator.n_forex=1", "generator.n_commodities=1",
    "generator.end_date=2021-06-30", "preprocess.lookback=10", "preprocess.horizon=10",
    "lstm.hidden_size=8", "lstm.max_epochs=3", "lstm.patience=1",
    "random_forest.n_trees=10", "gradient_boosting.n_trees=10",
    "backtest.initial_train=240", "backtest.step=90")]


def run(tmp_path, *argv, out="ws"):
    return main([*argv, f"--out={tmp_path / out}", "--seed=11", "--log-level=WARNING", *SMALL])


def error_of(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"]


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_help_on_every_subcommand(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    assert "usage: riskwatch " + command in capsys.readouterr().out


def test_top_level_help_lists_commands():
    text = build_parser().format_help()
    for command in COMMANDS:
        assert command in text


def test_train_before_preprocess(tmp_path, capsys):
    assert run(tmp_path, "train", "lstm") == 3
    err = error_of(capsys)
    assert err["code"] == "missing_artifact" and "run preprocess first" in err["message"]
    assert err["details"]["producer"] == "preprocess"


def test_preprocess_before_gen(tmp_path, capsys):
    assert run(tmp_path, "preprocess") == 3
    assert "run gen first" in error_of(capsys)["message"]


def test_invalid_config_lists_problems(tmp_path, capsys):
    code = main(["gen", f"--out={tmp_path}", "--set=lstm.hidden_size=x", "--set=cost.cost_fp=-1"])
    assert code == 2
    err = error_of(capsys)
    assert err["code"] == "invalid_config" and len(err["details"]) == 2


def test_bad_bench_argument(tmp_path, capsys):
    assert run(tmp_path, "bench", "--volumes=0") == 2
    assert error_of(capsys)["code"] == "bad_argument"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for argv in (["gen"], ["preprocess"], ["train", "lstm"], ["eval"]):
        assert run(root, *argv) == 0, argv
    return root


def test_gen_preprocess_train_eval_pipeline(workspace):
    ws = workspace / "ws"
    for rel in ("data/records.csv", "data/events.json", "data/summary.txt", "prepared/features.csv",
                "prepared/labels.csv", "prepared/meta.json", "prepared/state.json", "models/lstm.json",
                "reports/metrics.json", "reports/roc.csv"):
        assert (ws / rel).exists(), rel
    report = json.loads((ws / "reports" / "metrics.json").read_text())
    blocks = report["models"]
    assert set(blocks) == {"lstm"}
    for per_rt in blocks.values():
        for m in per_rt.values():
            assert {"accuracy", "precision", "recall", "f1"} <= set(m)


def test_full_chain_through_replay(workspace, capsys):
    for argv in (["train", "rf"], ["train", "gbt"], ["eval"], ["calibrate"],
                 ["replay", "--shuffle", "--workers=2"]):
        assert run(workspace, *argv) == 0, argv
    out = capsys.readouterr().out
    assert "random_forest" in out and "gradient_boosting" in out
    assert "batch recomputation matches" in out
    summary = json.loads((workspace / "ws" / "replay" / "metrics.json").read_text())
    assert summary["matches_batch"] is True and summary["assessments"] > 0


def test_backtest_reports_auc_ordering(workspace):
    assert run(workspace, "backtest", "--models=rf,gbt") == 0
    report = json.loads((workspace / "ws" / "reports" / "backtest.json").read_text())
    ordering = report["auc_ordering"]
    assert set(ordering["models"]) == {"random_forest", "gradient_boosting"}
    assert ordering["reference"] == {"liquidity": 0.95, "operational": 0.82}


def test_identical_seed_gives_identical_artifacts(tmp_path):
    for out in ("a", "b"):
        for argv in (["gen"], ["preprocess"], ["train", "rf"], ["train", "lstm"]):
            assert run(tmp_path, *argv, out=out) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) >= 8
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "riskwatch.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "replay" in res.stdout
