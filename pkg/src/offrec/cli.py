"""Command-line entry point: ``offrec {train,eval,sweep,verify,gen-synthetic,ingest}``.

Exit codes: 0 success, 1 a verification check or sweep cell failed,
2 configuration or usage error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import config as cfgmod
from .data import ReplayBuffer, build_buffer, ingest_csv, select, sessions_from_rows, split_sessions, synthetic_rows, write_item_map, write_log_csv
from .errors import ConfigError, DataError, NumericError, OffrecError, UsageError
from .evaluation import EvalEvents, MetricReport, aggregate, build_eval_events, evaluate, ranking_source_from_policy, ranking_source_from_q
from .learners import NEEDS_BEHAVIOR, train, train_behavior
from .models import CriticModel, load_model, save_model

log = logging.getLogger("offrec")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


# -- data -------------------------------------------------------------------------------------------


@dataclass
class PreparedData:
    n_items: int
    window: int
    train_buffer: ReplayBuffer
    val_buffer: ReplayBuffer
    val_events: EvalEvents
    test_events: EvalEvents
    item_map: dict[str, int]
    n_tokens: int | None = None


def _buffer_events(buf: ReplayBuffer) -> EvalEvents:
    """Every logged transition of a tabular buffer as a prediction target."""
    return EvalEvents(buf.states, buf.actions, np.zeros(len(buf), dtype=bool), np.arange(len(buf)))


def _fixture_data(dc: cfgmod.DataConfig) -> PreparedData:
    """Train/validation/test rollouts of a fixture's logging policy (80/10/10 episodes)."""
    from .oracle import generate_logs, load_fixture

    mdp = load_fixture(dc.fixture)
    sizes = (max(1, dc.n_sessions * 8 // 10), max(1, dc.n_sessions // 10), max(1, dc.n_sessions // 10))
    train_b, val_b, test_b = (generate_logs(mdp, None, n, seed=dc.seed * 3 + k).buffer for k, n in enumerate(sizes))
    return PreparedData(
        n_items=mdp.A,
        window=1,
        train_buffer=train_b,
        val_buffer=val_b,
        val_events=_buffer_events(val_b),
        test_events=_buffer_events(test_b),
        item_map={f"a{a}": a for a in range(mdp.A)},
        n_tokens=mdp.S + 1,
    )


def prepare_data(dc: cfgmod.DataConfig) -> PreparedData:
    """Load or generate sessions, split them 80/10/10 and build buffers."""
    if dc.source == "fixture":
        return _fixture_data(dc)
    if dc.source == "csv":
        res = ingest_csv(dc.path, dc.ingest_config())
        if res.n_malformed:
            log.warning("skipped %d malformed rows in %s", res.n_malformed, dc.path)
    else:
        res = sessions_from_rows(synthetic_rows(dc.synthetic_config(), dc.seed), dc.ingest_config())
    sessions = res.sessions
    if dc.max_sessions and len(sessions) > dc.max_sessions:
        keep = np.sort(np.random.default_rng([dc.seed, 11]).choice(len(sessions), dc.max_sessions, replace=False))
        sessions = [sessions[i] for i in keep]
    split = split_sessions(sessions, dc.seed)
    train_s, val_s, test_s = (select(sessions, ids) for ids in (split.train, split.validation, split.test))
    n = res.n_items
    rm = dc.reward_map()
    return PreparedData(
        n_items=n,
        window=dc.window,
        train_buffer=build_buffer(train_s, rm, dc.window, n),
        val_buffer=build_buffer(val_s, rm, dc.window, n),
        val_events=build_eval_events(val_s, dc.window, n),
        test_events=build_eval_events(test_s, dc.window, n),
        item_map=res.item_map,
    )


# -- train ----------------------------------------------------------------------------------------------


def _ranking_model(learner):
    return learner.critic if learner.kind == "dqn" else learner.policy


def run_seed(cfg: cfgmod.ExperimentConfig, seed: int, run_dir: Path, data: PreparedData | None = None) -> MetricReport:
    """Train one seed into ``run_dir`` and return its test report."""
    data = data or prepare_data(cfg.data)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = cfg.to_dict()
    snapshot["run"]["seeds"] = [seed]
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))
    behavior = None
    if cfg.kind in NEEDS_BEHAVIOR:
        behavior = train_behavior(data.train_buffer, cfg.encoder, cfg.behavior, val_buffer=data.val_buffer, seed=seed, n_tokens=data.n_tokens).model
        save_model(run_dir / "behavior.orec", behavior, "behavior")
    result = train(
        cfg.kind,
        data.train_buffer,
        data.val_events,
        cfg.encoder,
        cfg.learner,
        cfg.train,
        seed=seed,
        behavior=behavior,
        n_tokens=data.n_tokens,
        metrics_path=run_dir / "metrics.csv",
        dump_dir=run_dir,
    )
    learner = result.learner
    save_model(run_dir / "model.orec", _ranking_model(learner), cfg.kind, {"seed": seed, "best_step": result.best_step})
    if learner.critic is not None and cfg.kind != "dqn":
        save_model(run_dir / "critic.orec", learner.critic, cfg.kind, {"seed": seed})
    test_events = data.test_events
    report = evaluate(learner.ranking_source(), test_events, cfg.train.ks)
    write_report(run_dir / "test", report, {"learner": cfg.kind, "seed": seed})
    if test_events.purchase.any():
        write_report(run_dir / "test_purchase", evaluate(learner.ranking_source(), test_events, cfg.train.ks, "purchase"), {"learner": cfg.kind, "seed": seed})
    return report


def write_report(stem: Path, report: MetricReport, extra: dict | None = None) -> None:
    row = {**(extra or {}), "scope": report.scope, "n_events": report.n_events, **report.row()}
    stem.with_suffix(".json").write_text(report.to_json())
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_train(cfg: cfgmod.ExperimentConfig, out: Path) -> dict:
    data = prepare_data(cfg.data)
    base = out / cfg.kind
    reports = [run_seed(cfg, seed, base / f"seed{seed}", data) for seed in cfg.run.seeds]
    agg = {"learner": cfg.kind, "n_seeds": len(reports), **aggregate(reports)}
    with open(base / "aggregate.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(agg), lineterminator="\n")
        w.writeheader()
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in agg.items()})
    return agg


# -- eval -------------------------------------------------------------------------------------------------


def run_eval(checkpoint: Path, cfg: cfgmod.ExperimentConfig, scope: str, out: Path) -> MetricReport:
    if not checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    model, meta = load_model(checkpoint)
    data = prepare_data(cfg.data)
    if model.n_actions != data.n_items:
        raise ConfigError(f"catalog mismatch: checkpoint has {model.n_actions} items, data has {data.n_items}")
    if meta["window"] != data.window:
        raise ConfigError(f"window mismatch: checkpoint {meta['window']}, data {data.window}")
    source = ranking_source_from_q(model) if isinstance(model, CriticModel) else ranking_source_from_policy(model)
    report = evaluate(source, data.test_events, cfg.train.ks, scope)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / f"eval_{scope}", report, {"learner": meta.get("kind", ""), "checkpoint": str(checkpoint)})
    return report


# -- sweep --------------------------------------------------------------------------------------------------

SWEEP_COLUMNS = ["learner", "param", "param_value", "seed", "metric", "value"]


def sweep_cells(cfg: cfgmod.ExperimentConfig) -> list[tuple[str, float | None]]:
    """(label, value) per sweep cell; SR beta sweeps add an ``adaptive`` cell."""
    sp = cfg.sweep
    if cfg.kind not in cfgmod.SWEEP_PARAMS[sp.param]:
        raise ConfigError(f"sweep.param: {sp.param!r} does not apply to learner {cfg.kind!r}")
    if not sp.values:
        raise ConfigError("sweep.values: at least one value required")
    cells = [(repr(v), v) for v in sp.values]
    if cfg.kind == "sr" and sp.param == "beta" and sp.include_adaptive:
        cells.append(("adaptive", None))
    return cells


def _cell_config(cfg: cfgmod.ExperimentConfig, label: str, value: float | None) -> cfgmod.ExperimentConfig:
    p = cfg.sweep.param
    if label == "adaptive":
        return cfg.with_learner(adaptive_beta=True)
    overrides = {p: value}
    if cfg.kind == "sr" and p == "beta":
        overrides["adaptive_beta"] = False
    return cfg.with_learner(**overrides)


def _run_cell(args) -> tuple[str, int, dict | None, str]:
    cfg_dict, label, value, seed, run_dir = args
    cfg = cfgmod.from_dict(cfg_dict, check_required=False)
    try:
        report = run_seed(_cell_config(cfg, label, value), seed, Path(run_dir))
        return label, seed, report.row(), ""
    except (OffrecError, ValueError, FloatingPointError) as err:
        return label, seed, None, f"{type(err).__name__}: {err}"


def _completed(path: Path) -> set[tuple[str, str, str, int]]:
    if not path.is_file():
        return set()
    with open(path, newline="") as fh:
        return {(r["learner"], r["param"], r["param_value"], int(r["seed"])) for r in csv.DictReader(fh)}


def run_sweep(cfg: cfgmod.ExperimentConfig, out: Path) -> int:
    """Train and evaluate every (value, seed) cell; returns the number of failed cells.

    Results are appended to ``sweep_<learner>_<param>.csv`` under a file lock;
    cells already present are skipped, so re-running resumes a sweep.
    """
    cells = sweep_cells(cfg)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"sweep_{cfg.kind}_{cfg.sweep.param}.csv"
    lock = FileLock(str(csv_path) + ".lock")
    done = _completed(csv_path)
    todo = [
        (cfg.to_dict(), label, value, seed, str(out / f"sweep_{cfg.kind}_{cfg.sweep.param}" / label / f"seed{seed}"))
        for label, value in cells
        for seed in cfg.run.seeds
        if (cfg.kind, cfg.sweep.param, label, seed) not in done
    ]
    failures = 0

    def record(result):
        nonlocal failures
        label, seed, row, err = result
        if row is None:
            failures += 1
            log.error("sweep cell %s=%s seed %d failed: %s", cfg.sweep.param, label, seed, err)
            with lock, open(out / "sweep_errors.log", "a") as fh:
                fh.write(f"{cfg.kind},{cfg.sweep.param},{label},{seed},{err}\n")
            return
        with lock:
            new = not csv_path.is_file()
            with open(csv_path, "a", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                if new:
                    w.writerow(SWEEP_COLUMNS)
                for metric, value in row.items():
                    w.writerow([cfg.kind, cfg.sweep.param, label, seed, metric, repr(value)])

    if cfg.run.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.workers) as pool:
            for result in pool.map(_run_cell, todo):
                record(result)
    else:
        for args in todo:
            record(_run_cell(args))
    return failures


# -- verify / generate / ingest --------------------------------------------------------------------------


def run_verify(fixtures: list[str], learners: list[str] | None, out: Path, seed: int = 0) -> list[dict]:
    from .oracle import EXPECTATIONS, load_fixture, verify_learner

    out.mkdir(parents=True, exist_ok=True)
    results = []
    for name in fixtures:
        mdp = load_fixture(name)
        kinds = learners or [k for (f, k) in EXPECTATIONS if f == name]
        for kind in kinds:
            rep = verify_learner(kind, mdp, seed=seed)
            results.append(rep.to_dict())
            print(f"{'PASS' if rep.passed else 'FAIL'} {name} {kind} [{rep.expectation}] {rep.detail}")
    (out / "verify.json").write_text(json.dumps(results, indent=2))
    return results


def run_gen_synthetic(args, cfg: cfgmod.ExperimentConfig | None, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    if args.fixture:
        from .oracle import generate_logs, load_fixture

        path = out / f"{args.fixture}_logs.csv"
        generate_logs(load_fixture(args.fixture), None, args.episodes, args.seed if args.seed is not None else 0, csv_path=path)
    else:
        dc = cfg.data if cfg is not None else cfgmod.DataConfig()
        path = out / "synthetic_logs.csv"
        rows = synthetic_rows(dc.synthetic_config(), args.seed if args.seed is not None else dc.seed)
        write_log_csv(path, rows)
    return path


def run_ingest(path: Path, cfg: cfgmod.ExperimentConfig | None, out: Path) -> dict:
    dc = cfg.data if cfg is not None else cfgmod.DataConfig()
    res = ingest_csv(path, dc.ingest_config())
    out.mkdir(parents=True, exist_ok=True)
    write_item_map(out / "item_map.csv", res.item_map)
    summary = {
        "sessions": len(res.sessions),
        "items": res.n_items,
        "events": sum(len(s) for s in res.sessions),
        "malformed_rows": res.n_malformed,
        "dropped_sessions": res.n_dropped,
        "purchases": sum(sum(s.purchases) for s in res.sessions),
    }
    (out / "ingest_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


# -- argument handling ---------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="offrec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, learner=True):
        sp.add_argument("--config", type=Path, help="TOML or JSON experiment config (default: bundled desk preset)")
        sp.add_argument("--preset", help=f"bundled config to start from: {', '.join(cfgmod.presets())}")
        sp.add_argument("--out", type=Path, help="output directory (overrides OFFREC_OUT and the config)")
        sp.add_argument("--seed", type=int, help="single seed")
        sp.add_argument("--seeds", type=str, help="comma-separated seeds, e.g. 0,1,2")
        if learner:
            sp.add_argument("--learner", type=str, help="learner kind: sl, dqn, sdac, sc, sr, pc, dc, re")

    common(sub.add_parser("train", help="train one learner over one or more seeds"))
    ev = sub.add_parser("eval", help="evaluate a saved checkpoint on the test split")
    ev.add_argument("checkpoint", type=Path)
    ev.add_argument("--scope", choices=["all", "purchase"], default="all")
    common(ev, learner=False)
    common(sub.add_parser("sweep", help="sweep a trade-off parameter over values and seeds"))
    vf = sub.add_parser("verify", help="check learners against the exact tabular oracle")
    vf.add_argument("--fixtures", default="chain5,twosupport6", help="comma-separated fixture names")
    common(vf)
    gs = sub.add_parser("gen-synthetic", help="write synthetic logs in the ingest CSV schema")
    gs.add_argument("--fixture", help="roll out the logging policy of an oracle fixture instead of the session generator")
    gs.add_argument("--episodes", type=int, default=1000)
    common(gs, learner=False)
    ing = sub.add_parser("ingest", help="ingest a session CSV and persist the item-id map")
    ing.add_argument("csv", type=Path)
    common(ing, learner=False)
    return p


def _parse_seeds(args) -> list[int] | None:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as err:
            raise UsageError(f"--seeds: expected comma-separated integers, got {args.seeds!r}") from err
    if args.seed is not None:
        return [args.seed]
    return None


def _resolve(args) -> tuple[cfgmod.ExperimentConfig, Path]:
    if args.config is not None and args.preset is not None:
        raise UsageError("--config and --preset are mutually exclusive")
    d = cfgmod.read_config_file(args.config) if args.config is not None else cfgmod.preset(args.preset or "desk")
    env_out = os.environ.get("OFFREC_OUT")
    if env_out:
        d.setdefault("run", {})["out"] = env_out
    if getattr(args, "learner", None):
        d.setdefault("learner", {})["kind"] = args.learner
    seeds = _parse_seeds(args)
    if seeds is not None:
        d.setdefault("run", {})["seeds"] = seeds
    cfg = cfgmod.from_dict(d, check_required=args.command in ("train", "sweep"))
    out = args.out if args.out is not None else Path(cfg.run.out)
    return cfg, out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            out = args.out or Path(os.environ.get("OFFREC_OUT", "runs"))
            seeds = _parse_seeds(args) or [0]
            learners = [k.strip() for k in args.learner.split(",")] if args.learner else None
            results = run_verify([f.strip() for f in args.fixtures.split(",")], learners, out, seeds[0])
            return EXIT_OK if all(r["passed"] for r in results) else EXIT_FAILED
        cfg, out = _resolve(args)
        if args.command == "train":
            agg = run_train(cfg, out)
            print(json.dumps(agg, indent=2))
        elif args.command == "eval":
            report = run_eval(args.checkpoint, cfg, args.scope, out)
            print(report.to_json())
        elif args.command == "sweep":
            failures = run_sweep(cfg, out)
            if failures:
                print(f"{failures} sweep cell(s) failed; see {out / 'sweep_errors.log'}", file=sys.stderr)
                return EXIT_FAILED
        elif args.command == "gen-synthetic":
            print(run_gen_synthetic(args, cfg, out))
        elif args.command == "ingest":
            print(json.dumps(run_ingest(args.csv, cfg, out), indent=2))
        return EXIT_OK
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, DataError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
