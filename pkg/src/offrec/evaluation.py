"""
Offline next-item evaluation: HR@k, NDCG@k and paired significance tests.

A *ranking source* is any callable mapping a (batch, window) array of prefix
states to a (batch, n_items) score array. Higher scores rank first and ties
go to the smaller item id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .data import Session, prefix_window
from .errors import DataError, UsageError
from .models import CriticModel, PolicyModel, q_values, sample_gumbel
from .nn import no_grad

RankingSource = Callable[[np.ndarray], np.ndarray]
SCOPES = ("all", "purchase")


@dataclass(frozen=True)
class RankResult:
    true_item: int
    rank: int
    hits: dict[int, int]


@dataclass
class MetricReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_events: int
    scope: str = "all"

    @property
    def ks(self) -> list[int]:
        return sorted(self.hr)

    def row(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for k in self.ks:
            out[f"hr{k}"] = self.hr[k]
        for k in self.ks:
            out[f"ndcg{k}"] = self.ndcg[k]
        return out

    def to_json(self) -> str:
        return json.dumps({"scope": self.scope, "n_events": self.n_events, **self.row()}, indent=2, sort_keys=True)


@dataclass(frozen=True)
class EvalEvents:
    """Prediction targets of a session set: prefix states and the item that followed."""

    states: np.ndarray
    targets: np.ndarray
    purchase: np.ndarray
    session_index: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.targets)

    def restrict(self, scope: str) -> "EvalEvents":
        if scope not in SCOPES:
            raise UsageError(f"scope must be one of {SCOPES}, got {scope!r}")
        if scope == "all":
            return self
        m = self.purchase
        return EvalEvents(self.states[m], self.targets[m], self.purchase[m], self.session_index[m])


def build_eval_events(sessions: Sequence[Session], window: int, pad: int, last_only: bool = False) -> EvalEvents:
    """Every event after the first is a target; ``last_only`` keeps one per session."""
    states, targets, purchase, owner = [], [], [], []
    for i, s in enumerate(sessions):
        positions = range(1, len(s.items))
        if last_only:
            positions = positions[-1:]
        for t in positions:
            states.append(prefix_window(s.items, t, window, pad))
            targets.append(s.items[t])
            purchase.append(bool(s.purchases[t]))
            owner.append(i)
    return EvalEvents(
        np.asarray(states, dtype=np.int64).reshape(-1, window),
        np.asarray(targets, dtype=np.int64),
        np.asarray(purchase, dtype=bool),
        np.asarray(owner, dtype=np.int64),
    )


def ranks_of(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target under the (score desc, id asc) ordering."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    true = scores[rows, targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > true) | ((scores == true) & (ids < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def rank_result(scores: np.ndarray, true_item: int, ks: Sequence[int] = (5, 10)) -> RankResult:
    r = int(ranks_of(np.asarray(scores)[None, :], np.array([true_item]))[0])
    return RankResult(true_item, r, {k: int(r <= k) for k in ks})


def metrics_from_ranks(ranks: np.ndarray, ks: Sequence[int] = (5, 10), scope: str = "all") -> MetricReport:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise DataError("no evaluable events")
    gain = 1.0 / np.log2(ranks + 1.0)
    hr = {k: float(np.mean(ranks <= k)) for k in sorted(ks)}
    ndcg = {k: float(np.mean(np.where(ranks <= k, gain, 0.0))) for k in sorted(ks)}
    return MetricReport(hr=hr, ndcg=ndcg, n_events=int(ranks.size), scope=scope)


def event_ranks(source: RankingSource, events: EvalEvents, batch_size: int = 2048) -> np.ndarray:
    out = np.empty(len(events), dtype=np.int64)
    for lo in range(0, len(events), batch_size):
        hi = min(lo + batch_size, len(events))
        out[lo:hi] = ranks_of(source(events.states[lo:hi]), events.targets[lo:hi])
    return out


def evaluate(
    source: RankingSource,
    sessions: Sequence[Session] | EvalEvents,
    ks: Sequence[int] = (5, 10),
    scope: str = "all",
    *,
    window: int | None = None,
    pad: int | None = None,
    last_only: bool = False,
    batch_size: int = 2048,
) -> MetricReport:
    """HR@k and NDCG@k averaged over every evaluable event.

    ``sessions`` may be pre-built :class:`EvalEvents`; otherwise ``window`` and
    ``pad`` are needed to build the prefix states.
    """
    if isinstance(sessions, EvalEvents):
        events = sessions
    else:
        if window is None or pad is None:
            raise UsageError("evaluate needs window and pad to build states from sessions")
        events = build_eval_events(sessions, window, pad, last_only=last_only)
    events = events.restrict(scope)
    if len(events) == 0:
        raise DataError(f"no evaluable events for scope {scope!r}")
    return metrics_from_ranks(event_ranks(source, events, batch_size), ks, scope)


def ranking_source_from_policy(policy: PolicyModel) -> RankingSource:
    def source(states: np.ndarray) -> np.ndarray:
        with no_grad():
            return policy.logits(states).data

    return source


def ranking_source_from_q(critic: CriticModel, sample: bool = False, rng: np.random.Generator | None = None) -> RankingSource:
    """Rank by ``Q(s, .)``; with ``sample`` the ranking is drawn from ``softmax(Q)``.

    Sampling adds Gumbel noise to Q, which draws a full ranking from the
    Plackett-Luce model whose first pick is ``softmax(Q)``.
    """
    if sample and rng is None:
        raise UsageError("sampled ranking needs an rng")

    def source(states: np.ndarray) -> np.ndarray:
        with no_grad():
            q = q_values(critic, states).data
        return q + sample_gumbel(rng, q.shape) if sample else q

    return source


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided paired t-test p-value; identical samples give 1.0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError("paired_ttest needs two equal-length 1-D samples")
    if len(a) < 2:
        raise UsageError("paired_ttest needs at least 2 pairs")
    d = a - b
    if np.all(d == d[0]):
        # zero variance: no evidence unless the shift is nonzero
        return 1.0 if d[0] == 0 else 0.0
    return float(stats.ttest_rel(a, b).pvalue)


def aggregate(reports: Sequence[MetricReport]) -> dict[str, float]:
    """Mean and (sample) standard deviation of every metric across repeats."""
    if not reports:
        raise UsageError("nothing to aggregate")
    rows = [r.row() for r in reports]
    out: dict[str, float] = {}
    for key in rows[0]:
        vals = np.array([r[key] for r in rows])
        out[f"{key}_mean"] = float(vals.mean())
        out[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return out
