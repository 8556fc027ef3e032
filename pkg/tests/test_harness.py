import json
import math
import os

import numpy as np
import pytest

from shiftlab import cli, harness
from shiftlab.diffcore import ModelSpec, init_params


def test_coerce_value():
    assert harness.coerce_value("true") is True
    assert harness.coerce_value("OFF") is False
    assert harness.coerce_value("3") == 3
    assert harness.coerce_value("0.5") == 0.5
    assert harness.coerce_value("inf") == math.inf
    assert harness.coerce_value("minmax") == "minmax"


def test_parse_config_with_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# comment line\n"
        "method = nonparam  # trailing comment\n"
        "kappa = 0.5\n"
        "\n"
        "project = false\n"
    )
    cfg = harness.parse_config(str(path))
    assert cfg == {"method": "nonparam", "kappa": 0.5, "project": False}


def test_parse_config_errors(tmp_path):
    bad_key = tmp_path / "bad_key.cfg"
    bad_key.write_text("learning_rate = 0.1\n")
    with pytest.raises(harness.ConfigError, match="unknown config key"):
        harness.parse_config(str(bad_key))
    bad_line = tmp_path / "bad_line.cfg"
    bad_line.write_text("just some words\n")
    with pytest.raises(harness.ConfigError, match="line 1"):
        harness.parse_config(str(bad_line))


def test_apply_overrides_and_resolved():
    cfg = harness.apply_overrides({"lr": 0.1}, ["epochs=3", "sweep.tau=0.1,1.0"])
    assert cfg["epochs"] == 3
    assert cfg["sweep.tau"] == "0.1,1.0"
    with pytest.raises(harness.ConfigError):
        harness.apply_overrides({}, ["nonsense"])
    with pytest.raises(harness.ConfigError):
        harness.apply_overrides({}, ["sweep.bogus=1"])
    full = harness.resolved({"lr": 0.2})
    assert full["lr"] == 0.2
    assert full["method"] == "erm"
    with pytest.raises(harness.ConfigError):
        harness.resolved({"bogus": 1})


def test_build_datasets_two_domain_splits():
    cfg = harness.resolved({"data.total_points": 500, "data.test_n": 300})
    train, valid, test = harness.build_datasets(cfg, seed=0)
    assert len(train) == 500
    assert len(valid) == 100
    assert len(test) == 300
    # the test split is group-balanced regardless of the training ratio
    groups = np.array([ex.group for ex in test.examples])
    assert (groups == 1).sum() == 150


def test_build_datasets_distractor_test_is_unbiased():
    cfg = harness.resolved({"dataset": "distractor", "data.n": 400, "data.test_n": 400})
    _, _, test = harness.build_datasets(cfg, seed=0)
    neg = [ex for ex in test.examples if ex.label == 0]
    frac = np.mean([ex.group % 2 for ex in neg])
    assert 0.4 < frac < 0.6


def test_build_datasets_csv_path(tmp_path):
    cfg = harness.resolved({"data.total_points": 100})
    out = tmp_path / "data"
    harness.cmd_gen_data(cfg, 0, str(out))
    loaded_cfg = harness.resolved({"dataset": str(out / "train.csv")})
    train, valid, test = harness.build_datasets(loaded_cfg, seed=0)
    assert len(train) == 80 and len(valid) == 10 and len(test) == 10
    assert (out / "manifest.json").exists()


def test_build_model_spec_infers_architecture():
    cfg = harness.resolved({})
    train, _, _ = harness.build_datasets(cfg, seed=0)
    assert harness.build_model_spec(cfg, train).architecture == "linear"
    cfg_tokens = harness.resolved({"dataset": "distractor", "data.n": 100})
    tokens, _, _ = harness.build_datasets(cfg_tokens, seed=0)
    assert harness.build_model_spec(cfg_tokens, tokens).architecture == "embed_bag"
    cfg_mlp = harness.resolved({"model.arch": "mlp", "model.hidden": 4})
    assert harness.build_model_spec(cfg_mlp, train).hidden_units == 4


TINY = {
    "data.total_points": 300,
    "data.test_n": 200,
    "data.minority_ratio": 0.5,
    "epochs": 2,
    "batch_size": 32,
}


def test_train_run_erm_smoke():
    result = harness.train_run({**TINY, "method": "erm"}, seed=0)
    assert len(result.checkpoints) == 2
    assert 0 <= result.chosen_index < 2
    assert len(result.records) == 1  # identity only: erm has no adversary
    assert result.test_metrics.average_accuracy > 0.8
    assert len(result.log_rows) == 2


def test_train_run_checkpoint_cadence():
    result = harness.train_run({**TINY, "checkpoint_every": 4}, seed=0)
    # 300 points / 32 per batch = 10 steps per epoch, 20 total: every 4 plus tail
    assert len(result.checkpoints) == 5
    assert result.log_rows[-1]["step"] == 20


def test_train_run_is_deterministic():
    a = harness.train_run({**TINY, "method": "pdro"}, seed=3)
    b = harness.train_run({**TINY, "method": "pdro"}, seed=3)
    assert np.array_equal(a.model.params, b.model.params)
    assert a.chosen_index == b.chosen_index


def test_train_run_records_adversaries():
    result = harness.train_run({**TINY, "method": "rpdro", "adv_lr": 1.0}, seed=1)
    assert len(result.records) == 3  # identity + one per epoch checkpoint
    assert result.records[0].kl_estimate == 0.0


def test_train_run_rejects_unknown_method():
    with pytest.raises(harness.ConfigError):
        harness.train_run({**TINY, "method": "sgd"}, seed=0)


def test_train_run_raises_on_divergence():
    # an unbounded step drives the parameters non-finite immediately
    with pytest.raises(harness.DivergenceError):
        harness.train_run({**TINY, "lr": math.inf}, seed=0)


def test_model_bin_round_trip(tmp_path):
    model = init_params(ModelSpec("mlp", input_dim=3, hidden_units=4), seed=9)
    path = str(tmp_path / "model.bin")
    harness.save_model_bin(model, path)
    loaded = harness.load_model_bin(path)
    assert loaded.spec == model.spec
    assert np.array_equal(loaded.params, model.params)
    assert loaded.layout == model.layout


def test_sweep_grid_expansion():
    cfg = harness.resolved({"sweep.tau": "0.1,1.0", "sweep.lr": "0.05,0.1,0.2"})
    grid = harness.sweep_grid(cfg)
    assert len(grid) == 6
    assert {(p["tau"], p["lr"]) for p in grid} == {
        (t, l) for t in (0.1, 1.0) for l in (0.05, 0.1, 0.2)
    }
    assert harness.sweep_grid(harness.resolved({}))[0]["tau"] == harness.DEFAULTS["tau"]


def test_cmd_train_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    result = harness.cmd_train({**TINY, "method": "erm"}, 0, str(out))
    for name in ("run.jsonl", "metrics.csv", "model.bin", "plotdata_training.csv"):
        assert (out / name).exists()
    lines = (out / "run.jsonl").read_text().strip().splitlines()
    final = json.loads(lines[-1])
    assert final["final"] is True
    assert final["test_robust_acc"] == result.test_metrics.robust_accuracy


def test_cmd_train_records_divergence(tmp_path):
    out = tmp_path / "diverged"
    with pytest.raises(harness.DivergenceError):
        harness.cmd_train({**TINY, "lr": math.inf}, 0, str(out))
    row = json.loads((out / "run.jsonl").read_text().splitlines()[0])
    assert row["aborted"] is True


def test_cmd_continual_writes_artifacts(tmp_path):
    out = tmp_path / "cl"
    cfg = {"cl.tasks": 2, "cl.points": 60, "cl.epochs": 1, "cl.hidden": 4,
           "cl.fisher_samples": 50, "cl.method": "conatural"}
    metrics = harness.cmd_continual(cfg, 0, str(out))
    assert metrics.accuracy_matrix.shape == (2, 2)
    assert (out / "plotdata_accuracy.csv").exists()
    assert (out / "metrics.csv").exists()


def test_cmd_attack_with_prebuilt_model(tmp_path):
    out = tmp_path / "attack"
    model = init_params(ModelSpec("embed_bag", vocab_size=32, embed_dim=8), seed=0)
    cfg = {"attack.n": 5, "data.test_n": 50, "attack.constraint": "knn"}
    report = harness.cmd_attack(cfg, 0, str(out), model=model)
    assert len(report) == 5
    assert all(0.0 <= row["s_src"] <= 1.0 for row in report)
    assert all(row["success"] >= 0.0 for row in report)
    assert (out / "metrics.csv").exists()


def test_cmd_attack_rejects_dense_models(tmp_path):
    from shiftlab.diffcore import UnsupportedArchitectureError

    model = init_params(ModelSpec("linear", input_dim=2), seed=0)
    with pytest.raises(UnsupportedArchitectureError):
        harness.cmd_attack({}, 0, str(tmp_path / "x"), model=model)


def test_cmd_sweep_selects_a_point(tmp_path):
    out = tmp_path / "sweep"
    cfg = {**TINY, "method": "nonparam", "sweep.kappa": "0.01,1.0"}
    report = harness.cmd_sweep(cfg, 0, str(out))
    points = [row for row in report if "point" in row]
    assert len(points) == 2
    assert sum(row["selected"] for row in points) == 1
    assert (out / "metrics.csv").exists()


def test_cmd_report_ranks_runs(tmp_path):
    runs = []
    for seed in (0, 1):
        run_dir = tmp_path / f"run{seed}"
        harness.cmd_train({**TINY, "method": "erm"}, seed, str(run_dir))
        runs.append(str(run_dir))
    summary = harness.cmd_report(runs + [str(tmp_path / "missing")], str(tmp_path / "rep"))
    assert len(summary) == 2
    values = [row["robust_accuracy"] for row in summary]
    assert values == sorted(values, reverse=True)
    assert (tmp_path / "rep" / "report.csv").exists()


def test_cli_train_and_report(tmp_path):
    cfg_path = tmp_path / "cfg"
    cfg_path.write_text(
        "method = erm\ndata.total_points = 300\ndata.test_n = 200\n"
        "data.minority_ratio = 0.5\nepochs = 2\nbatch_size = 32\n"
    )
    run_dir = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(run_dir)]) == 0
    assert (run_dir / "model.bin").exists()
    rep_dir = tmp_path / "rep"
    assert cli.main(["report", "--runs", str(run_dir), "--out", str(rep_dir)]) == 0
    assert (rep_dir / "report.csv").exists()


def test_cli_rejects_bad_config(tmp_path, capsys):
    cfg_path = tmp_path / "cfg"
    cfg_path.write_text("bogus = 1\n")
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_gen_data(tmp_path):
    cfg_path = tmp_path / "cfg"
    cfg_path.write_text("data.total_points = 100\n")
    out = tmp_path / "data"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--set",
                     "data.test_n=50", "--out", str(out)]) == 0
    assert (out / "train.csv").exists()
    assert (out / "test.csv").exists()
