import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from offrec import cli
from offrec.data import SyntheticConfig, synthetic_rows, write_log_csv


def tiny_config(tmp_path, learner=None, **sections):
    """A small synthetic experiment written as JSON; sections override tables."""
    d = {
        "data": {"source": "synthetic", "n_sessions": 200, "n_items": 30, "window": 4, "seed": 1},
        "encoder": {"backbone": "gru", "embedding_dim": 8, "hidden_dim": 8, "window": 4},
        "learner": {"kind": "sl", "lr_actor": 1e-2, "lr_critic": 1e-2, "batch_size": 64, **(learner or {})},
        "behavior": {"lr": 1e-2, "max_epochs": 3},
        "train": {"steps": 40, "eval_every": 10, "ks": [5, 10]},
        "run": {"seeds": [0], "out": str(tmp_path / "runs")},
    }
    for name, table in sections.items():
        d.setdefault(name, {}).update(table)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_sl_writes_run_directory(tmp_path):
    cfg = tiny_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "runs" / "sl" / "seed0"
    for name in ("config.json", "metrics.csv", "model.orec", "model.orec.json", "test.json", "test.csv"):
        assert (run / name).is_file(), name
    rows = read_rows(run / "metrics.csv")
    assert [int(r["step"]) for r in rows] == [10, 20, 30, 40]
    ndcg = [float(r["ndcg10"]) for r in rows]
    assert ndcg[1] >= ndcg[0]
    snap = json.loads((run / "config.json").read_text())
    assert snap["run"]["seeds"] == [0] and snap["learner"]["kind"] == "sl"


def test_config_snapshot_reproduces_run(tmp_path):
    cfg = tiny_config(tmp_path, learner={"kind": "sdac"})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    snap = tmp_path / "a" / "sdac" / "seed0" / "config.json"
    assert cli.main(["train", "--config", str(snap), "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "sdac" / "seed0" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "sdac" / "seed0" / "metrics.csv").read_bytes()
    assert a == b


def test_missing_required_field_exits_2(tmp_path, capsys):
    cfg = tiny_config(tmp_path, learner={"kind": "sc", "beta": 1.0})
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "learner.delta" in capsys.readouterr().err


@pytest.mark.parametrize(
    "section, bad, field",
    [("data", {"window": 0}, "data.window"), ("learner", {"alpha": -1.0}, "learner"), ("encoder", {"colour": 1}, "encoder.colour"), ("encoder", {"window": 5}, "encoder.window")],
)
def test_invalid_fields_exit_2(tmp_path, capsys, section, bad, field):
    cfg = tiny_config(tmp_path, **{section: bad})
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert field in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "missing.toml")]) == 2
    assert cli.main(["train", "--config", str(tiny_config(tmp_path)), "--seeds", "a,b"]) == 2
    assert cli.main(["train", "--preset", "nope"]) == 2
    assert cli.main(["train", "--config", str(tiny_config(tmp_path)), "--learner", "ppo"]) == 2


def test_two_seeds_aggregate(tmp_path):
    cfg = tiny_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--seeds", "0,1"]) == 0
    (agg,) = read_rows(tmp_path / "runs" / "sl" / "aggregate.csv")
    assert agg["n_seeds"] == "2"
    for key in ("hr5_mean", "hr5_std", "hr10_mean", "hr10_std", "ndcg5_mean", "ndcg5_std", "ndcg10_mean", "ndcg10_std"):
        assert key in agg
    per_seed = [json.loads((tmp_path / "runs" / "sl" / f"seed{s}" / "test.json").read_text())["hr10"] for s in (0, 1)]
    assert float(agg["hr10_mean"]) == pytest.approx(np.mean(per_seed))
    assert float(agg["hr10_std"]) == pytest.approx(np.std(per_seed, ddof=1))


@pytest.mark.parametrize("kind", ["sl", "dqn", "dc"])
def test_eval_reproduces_training_numbers(tmp_path, kind):
    cfg = tiny_config(tmp_path, learner={"kind": kind})
    assert cli.main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "runs" / kind / "seed0"
    assert cli.main(["eval", str(run / "model.orec"), "--config", str(cfg), "--out", str(run)]) == 0
    trained = json.loads((run / "test.json").read_text())
    evaluated = json.loads((run / "eval_all.json").read_text())
    assert trained == evaluated
    (row,) = read_rows(run / "eval_all.csv")
    assert [k for k in row if k.startswith(("hr", "ndcg"))] == ["hr5", "hr10", "ndcg5", "ndcg10"]


def test_eval_catalog_mismatch_exits_2(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    other = tiny_config(tmp_path, data={"n_items": 40})
    assert cli.main(["eval", str(tmp_path / "runs" / "sl" / "seed0" / "model.orec"), "--config", str(other)]) == 2
    assert "catalog mismatch" in capsys.readouterr().err


def test_purchase_scope_on_click_only_data(tmp_path, capsys):
    rows = [(s, i, t, "click") for s, i, t, _ in synthetic_rows(SyntheticConfig(n_sessions=200, n_items=30), seed=0)]
    log = tmp_path / "clicks.csv"
    write_log_csv(log, rows)
    cfg = tiny_config(tmp_path, data={"source": "csv", "path": str(log)})
    assert cli.main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "runs" / "sl" / "seed0"
    assert not (run / "test_purchase.json").exists()
    assert cli.main(["eval", str(run / "model.orec"), "--config", str(cfg), "--scope", "purchase"]) == 2
    assert "no evaluable events" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_numeric_failure_exits_3(tmp_path, capsys):
    cfg = tiny_config(tmp_path, learner={"kind": "dqn", "lr_critic": 1e300})
    assert cli.main(["train", "--config", str(cfg)]) == 3
    assert "numeric failure" in capsys.readouterr().err
    assert (tmp_path / "runs" / "dqn" / "seed0" / "nan_batch.npz").is_file()


def _sweep_config(tmp_path, kind, values, seeds=(0, 1), **learner):
    return tiny_config(tmp_path, learner={"kind": kind, **learner}, sweep={"param": "beta", "values": values}, run={"seeds": list(seeds)}, train={"steps": 10, "eval_every": 10})


def test_pc_beta_sweep_shape(tmp_path):
    cfg = _sweep_config(tmp_path, "pc", [0.1, 1, 10, 100], beta=1.0)
    assert cli.main(["sweep", "--config", str(cfg)]) == 0
    rows = read_rows(tmp_path / "runs" / "sweep_pc_beta.csv")
    assert list(rows[0]) == ["learner", "param", "param_value", "seed", "metric", "value"]
    for seed in ("0", "1"):
        for metric in ("hr5", "hr10", "ndcg5", "ndcg10"):
            cell = [r for r in rows if r["seed"] == seed and r["metric"] == metric]
            assert sorted(float(r["param_value"]) for r in cell) == [0.1, 1, 10, 100]


def test_sr_sweep_has_adaptive_cell_and_is_idempotent(tmp_path):
    cfg = _sweep_config(tmp_path, "sr", [1.0, 10.0], seeds=(0,), epsilon=3.0)
    assert cli.main(["sweep", "--config", str(cfg)]) == 0
    path = tmp_path / "runs" / "sweep_sr_beta.csv"
    labels = {r["param_value"] for r in read_rows(path)}
    assert labels == {"1.0", "10.0", "adaptive"}
    fixed = json.loads((tmp_path / "runs" / "sweep_sr_beta" / "1.0" / "seed0" / "config.json").read_text())
    adaptive = json.loads((tmp_path / "runs" / "sweep_sr_beta" / "adaptive" / "seed0" / "config.json").read_text())
    assert fixed["learner"]["adaptive_beta"] is False and adaptive["learner"]["adaptive_beta"] is True
    before = path.read_bytes()
    t0 = time.perf_counter()
    assert cli.main(["sweep", "--config", str(cfg)]) == 0
    assert path.read_bytes() == before
    assert time.perf_counter() - t0 < 5.0


def test_sweep_param_must_apply(tmp_path, capsys):
    cfg = tiny_config(tmp_path, learner={"kind": "dc"}, sweep={"param": "delta", "values": [0.1]})
    assert cli.main(["sweep", "--config", str(cfg)]) == 2
    assert "sweep.param" in capsys.readouterr().err


def test_sweep_failures_are_recorded_and_continue(tmp_path, monkeypatch):
    real = cli.run_seed

    def flaky(cfg, seed, run_dir, data=None):
        if cfg.learner.beta == 10.0:
            raise cli.DataError("injected failure")
        return real(cfg, seed, run_dir, data)

    monkeypatch.setattr(cli, "run_seed", flaky)
    cfg = _sweep_config(tmp_path, "pc", [1.0, 10.0], seeds=(0,), beta=1.0)
    assert cli.main(["sweep", "--config", str(cfg)]) == 1
    rows = read_rows(tmp_path / "runs" / "sweep_pc_beta.csv")
    assert {r["param_value"] for r in rows} == {"1.0"}
    assert "injected failure" in (tmp_path / "runs" / "sweep_errors.log").read_text()


def test_fixture_sweep_within_budget(tmp_path):
    t0 = time.perf_counter()
    assert cli.main(["sweep", "--preset", "twosupport6", "--out", str(tmp_path), "--seeds", "0"]) == 0
    assert time.perf_counter() - t0 < 600
    rows = read_rows(tmp_path / "sweep_pc_beta.csv")
    assert {r["param_value"] for r in rows} == {"0.1", "1.0", "10.0", "100.0"}


def test_verify_reports_and_exit_code(tmp_path, capsys):
    assert cli.main(["verify", "--fixtures", "twosupport6", "--learner", "sdac", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("PASS twosupport6 sdac [overestimate]")
    (rep,) = json.loads((tmp_path / "verify.json").read_text())
    assert rep["passed"] and rep["oos_max_q"] > rep["max_return"]


def test_gen_synthetic_and_ingest(tmp_path):
    assert cli.main(["gen-synthetic", "--out", str(tmp_path), "--seed", "3"]) == 0
    logs = tmp_path / "synthetic_logs.csv"
    assert cli.main(["ingest", str(logs), "--out", str(tmp_path / "ing")]) == 0
    summary = json.loads((tmp_path / "ing" / "ingest_summary.json").read_text())
    assert summary["sessions"] > 0 and summary["malformed_rows"] == 0
    assert (tmp_path / "ing" / "item_map.csv").is_file()


def test_gen_synthetic_from_fixture(tmp_path):
    assert cli.main(["gen-synthetic", "--fixture", "chain5", "--episodes", "50", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "chain5_logs.csv")
    assert len({r["session_id"] for r in rows}) == 50
    assert {r["item_id"] for r in rows} <= {"a0", "a1", "a2", "a3"}


def test_offrec_out_environment(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path)
    monkeypatch.setenv("OFFREC_OUT", str(tmp_path / "env_out"))
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "env_out" / "sl" / "seed0" / "metrics.csv").is_file()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "offrec.cli", "train", "--config", str(tiny_config(tmp_path, learner={"kind": "sc", "beta": 1.0}))], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "learner.delta" in proc.stderr
