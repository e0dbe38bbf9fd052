"""Training loops: the logging-policy estimator and the generic learner driver."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..data import Batch, ReplayBuffer
from ..errors import ConfigError, NumericError
from ..evaluation import EvalEvents, MetricReport, evaluate
from ..models import BehaviorModel, EncoderConfig, policy_logprobs
from ..nn import no_grad
from .agents import Learner, make_learner, stream
from .core import LearnerConfig, sl_update

log = logging.getLogger(__name__)

_BATCHES, _BEHAVIOR_INIT, _BEHAVIOR_BATCHES = 4, 6, 7


@dataclass
class BehaviorConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 30
    patience: int = 2
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("behavior config: lr > 0, batch_size >= 1, max_epochs >= 1, patience >= 1 required")


@dataclass
class TrainConfig:
    steps: int = 2000
    eval_every: int = 200
    ks: tuple[int, ...] = (5, 10)

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        if self.steps < 1 or self.eval_every < 1 or not self.ks or min(self.ks) < 1:
            raise ConfigError("train config: steps >= 1, eval_every >= 1 and positive ks required")


@dataclass
class BehaviorResult:
    model: BehaviorModel
    val_ce: list[float]
    epochs: int
    stopped_early: bool


@dataclass
class TrainResult:
    learner: Learner
    rows: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_report: MetricReport | None = None


def cross_entropy(model, buffer: ReplayBuffer, batch_size: int = 4096) -> float:
    """Mean ``-log pi(a|s)`` over a whole buffer."""
    total = 0.0
    with no_grad():
        for lo in range(0, len(buffer), batch_size):
            b = buffer.batch(np.arange(lo, min(lo + batch_size, len(buffer))))
            lp = policy_logprobs(model, b.states).data
            total += -lp[np.arange(len(b)), b.actions].sum()
    return total / len(buffer)


def train_behavior(
    train_buffer: ReplayBuffer,
    encoder: EncoderConfig,
    cfg: BehaviorConfig | None = None,
    *,
    val_buffer: ReplayBuffer | None = None,
    seed: int = 0,
    n_tokens: int | None = None,
    head_scale: float | None = None,
) -> BehaviorResult:
    """Fit the logging policy by cross-entropy with early stopping, then freeze it.

    Without a validation buffer the training buffer doubles as one.
    """
    cfg = cfg or BehaviorConfig()
    if len(train_buffer) == 0:
        raise ConfigError("cannot estimate a logging policy from an empty buffer")
    val_buffer = train_buffer if val_buffer is None or len(val_buffer) == 0 else val_buffer
    model = BehaviorModel(encoder, train_buffer.n_actions, n_tokens, rng=stream(seed, _BEHAVIOR_INIT), head_scale=head_scale)
    rng = stream(seed, _BEHAVIOR_BATCHES)
    best, best_state, history, stale = math.inf, model.params.state_dict(), [], 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_buffer))
        for lo in range(0, len(order), cfg.batch_size):
            sl_update(model, train_buffer.batch(order[lo : lo + cfg.batch_size]), cfg.lr)
        ce = cross_entropy(model, val_buffer)
        history.append(ce)
        if ce < best - cfg.min_delta:
            best, best_state, stale = ce, model.params.state_dict(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.params.load_state_dict(best_state)
    return BehaviorResult(model.freeze(), history, epoch, stale >= cfg.patience)


def metric_columns(ks: Sequence[int]) -> list[str]:
    return ["step", "learner", "critic_loss", "actor_loss", "beta", "residual"] + [f"hr{k}" for k in ks] + [f"ndcg{k}" for k in ks]


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _dump_batch(path: Path, batch: Batch) -> None:
    np.savez(path, states=batch.states, actions=batch.actions, rewards=batch.rewards, next_states=batch.next_states, terminals=batch.terminals)


def train(
    kind: str,
    train_buffer: ReplayBuffer,
    val_events: EvalEvents | None,
    encoder: EncoderConfig,
    cfg: LearnerConfig | None = None,
    tcfg: TrainConfig | None = None,
    *,
    seed: int = 0,
    behavior: BehaviorModel | None = None,
    n_tokens: int | None = None,
    head_scale: float | None = None,
    metrics_path: str | Path | None = None,
    dump_dir: str | Path | None = None,
) -> TrainResult:
    """Run ``tcfg.steps`` minibatch updates, evaluating every ``eval_every`` steps.

    The learner ends up holding the parameters of the best validation
    NDCG (at the largest configured k, i.e. NDCG@10 by default).
    """
    cfg = cfg or LearnerConfig()
    tcfg = tcfg or TrainConfig()
    if len(train_buffer) == 0:
        raise ConfigError("training buffer is empty")
    learner = make_learner(kind, train_buffer.n_actions, encoder, cfg, seed=seed, n_tokens=n_tokens, behavior=behavior, head_scale=head_scale)
    batch_rng = stream(seed, _BATCHES)
    result = TrainResult(learner)
    select_key = f"ndcg{max(tcfg.ks)}"
    best_val, best_snap = -math.inf, None
    cols = metric_columns(tcfg.ks)
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
    res_sum, res_n = 0.0, 0
    try:
        for step in range(1, tcfg.steps + 1):
            batch = train_buffer.sample(batch_rng, cfg.batch_size)
            progress = (step - 1) / max(1, tcfg.steps - 1)
            try:
                report = learner.update(batch, progress)
            except NumericError as err:
                bad = getattr(err, "batch", None) or batch
                where = ""
                if dump_dir is not None:
                    path = Path(dump_dir) / "nan_batch.npz"
                    _dump_batch(path, bad)
                    where = f"; offending batch written to {path}"
                raise NumericError(f"{kind} diverged at step {step}: {err}{where}") from err
            if "residual" in report.aux:
                res_sum, res_n = res_sum + report.aux["residual"], res_n + 1
            if val_events is None or not (step % tcfg.eval_every == 0 or step == tcfg.steps):
                continue
            metrics = evaluate(learner.ranking_source(), val_events, tcfg.ks)
            row = {
                "step": step,
                "learner": kind,
                "critic_loss": report.critic_loss,
                "actor_loss": report.actor_loss,
                "beta": learner.beta if kind in ("sc", "sr", "pc") else None,
                # mean over the steps since the previous evaluation
                "residual": res_sum / res_n if res_n else None,
                **metrics.row(),
            }
            res_sum, res_n = 0.0, 0
            result.rows.append(row)
            if fh is not None:
                writer.writerow({k: _fmt(row[k]) for k in cols})
                fh.flush()
            if row[select_key] > best_val:
                best_val, best_snap = row[select_key], learner.snapshot()
                result.best_step, result.best_report = step, metrics
    finally:
        if fh is not None:
            fh.close()
    if best_snap is not None:
        learner.restore(best_snap)
    return result
