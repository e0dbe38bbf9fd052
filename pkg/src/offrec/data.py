"""
Session log ingestion, train/validation/test splits, reward assignment and the
replay buffer of logged transitions.

Items are remapped to dense ids ``[0, n_items)``; the padding token used in
state windows is ``n_items`` itself, so encoders see a vocabulary of
``n_items + 1`` tokens while policy and critic heads only score real items.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

CSV_COLUMNS = ("session_id", "item_id", "timestamp", "behavior")


class Feedback(enum.Enum):
    CLICK = "click"
    PURCHASE = "purchase"


# addtocart counts as purchase feedback for Retailrocket-style logs
BEHAVIOR_LABELS = {
    "click": Feedback.CLICK,
    "view": Feedback.CLICK,
    "purchase": Feedback.PURCHASE,
    "buy": Feedback.PURCHASE,
    "addtocart": Feedback.PURCHASE,
}


@dataclass(frozen=True)
class SessionEvent:
    session_id: str
    item: int
    timestamp: int
    feedback: Feedback


@dataclass(frozen=True)
class Session:
    session_id: str
    items: tuple[int, ...]
    timestamps: tuple[int, ...]
    purchases: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.items)

    def events(self) -> list[SessionEvent]:
        return [
            SessionEvent(self.session_id, i, ts, Feedback.PURCHASE if p else Feedback.CLICK)
            for i, ts, p in zip(self.items, self.timestamps, self.purchases)
        ]


@dataclass(frozen=True)
class IngestConfig:
    min_length: int = 3
    purchase_sessions_only: bool = False
    session_col: str = "session_id"
    item_col: str = "item_id"
    time_col: str = "timestamp"
    behavior_col: str = "behavior"

    def __post_init__(self):
        if self.min_length < 1:
            raise ConfigError("min_length must be >= 1")


@dataclass
class IngestResult:
    sessions: list[Session]
    item_map: dict[str, int]
    n_malformed: int = 0
    n_dropped: int = 0
    malformed_lines: list[int] = field(default_factory=list)

    @property
    def n_items(self) -> int:
        return len(self.item_map)


def ingest_csv(path: str | Path, config: IngestConfig | None = None) -> IngestResult:
    """Read a session log, order events in time and remap item ids.

    Malformed rows are skipped and counted. An unrecognised behavior label is
    a hard error since it would silently change the reward signal.
    """
    config = config or IngestConfig()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = (config.session_col, config.item_col, config.time_col, config.behavior_col)
        missing = [c for c in needed if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        raw: dict[str, list[tuple[int, int, str, bool]]] = {}
        bad: list[int] = []
        for order, row in enumerate(reader):
            line = order + 2
            sid = (row.get(config.session_col) or "").strip()
            item = (row.get(config.item_col) or "").strip()
            behavior = (row.get(config.behavior_col) or "").strip().lower()
            try:
                ts = int(float(row.get(config.time_col) or ""))
            except ValueError:
                bad.append(line)
                continue
            if not sid or not item or not behavior:
                bad.append(line)
                continue
            if behavior not in BEHAVIOR_LABELS:
                raise DataError(f"{path}:{line}: unknown behavior label {behavior!r}")
            purchase = BEHAVIOR_LABELS[behavior] is Feedback.PURCHASE
            raw.setdefault(sid, []).append((ts, order, item, purchase))
    if bad:
        log.warning("%s: skipped %d malformed rows", path, len(bad))
    return _finalize(raw, config, bad)


def sessions_from_rows(rows: Iterable[Sequence], config: IngestConfig | None = None) -> IngestResult:
    """Same as :func:`ingest_csv` for in-memory ``(session, item, ts, behavior)`` rows."""
    config = config or IngestConfig()
    raw: dict[str, list[tuple[int, int, str, bool]]] = {}
    for order, (sid, item, ts, behavior) in enumerate(rows):
        behavior = str(behavior).lower()
        if behavior not in BEHAVIOR_LABELS:
            raise DataError(f"unknown behavior label {behavior!r}")
        raw.setdefault(str(sid), []).append((int(ts), order, str(item), BEHAVIOR_LABELS[behavior] is Feedback.PURCHASE))
    return _finalize(raw, config, [])


def _finalize(raw, config: IngestConfig, bad: list[int]) -> IngestResult:
    kept: list[tuple[str, list[tuple[int, int, str, bool]]]] = []
    dropped = 0
    for sid, events in raw.items():
        events.sort(key=lambda e: (e[0], e[1]))
        if len(events) < config.min_length:
            dropped += 1
            continue
        if config.purchase_sessions_only and not any(e[3] for e in events):
            dropped += 1
            continue
        kept.append((sid, events))
    item_map: dict[str, int] = {}
    sessions = []
    for sid, events in kept:
        ids = []
        for _, _, item, _ in events:
            if item not in item_map:
                item_map[item] = len(item_map)
            ids.append(item_map[item])
        sessions.append(
            Session(
                session_id=sid,
                items=tuple(ids),
                timestamps=tuple(e[0] for e in events),
                purchases=tuple(e[3] for e in events),
            )
        )
    return IngestResult(sessions, item_map, n_malformed=len(bad), n_dropped=dropped, malformed_lines=bad)


def write_item_map(path: str | Path, item_map: dict[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["raw_id", "dense_id"])
        for raw_id, dense in sorted(item_map.items(), key=lambda kv: kv[1]):
            w.writerow([raw_id, dense])


def read_item_map(path: str | Path) -> dict[str, int]:
    with open(path, newline="") as fh:
        return {row["raw_id"]: int(row["dense_id"]) for row in csv.DictReader(fh)}


def write_log_csv(path: str | Path, rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow(row)


# -- rewards and transitions -------------------------------------------------------


@dataclass(frozen=True)
class RewardMap:
    """Feedback -> reward, shifted so the best feedback maps to exactly 0."""

    click_reward: float = 0.2
    purchase_reward: float = 1.0
    shift: float | None = None

    def __post_init__(self):
        if self.shift is None:
            object.__setattr__(self, "shift", -max(self.click_reward, self.purchase_reward))
        top = max(self.click_reward, self.purchase_reward) + self.shift
        if top != 0.0:
            raise ConfigError(f"shift {self.shift} maps the best feedback to {top}, expected 0")

    @property
    def click(self) -> float:
        return self.click_reward + self.shift

    @property
    def purchase(self) -> float:
        return self.purchase_reward + self.shift

    def reward(self, purchase: bool) -> float:
        return self.purchase if purchase else self.click


@dataclass(frozen=True)
class Transition:
    state: tuple[int, ...]
    state_len: int
    action: int
    reward: float
    next_state: tuple[int, ...]
    terminal: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


class ReplayBuffer:
    """Immutable column store of logged transitions."""

    def __init__(self, states, state_len, actions, rewards, next_states, terminals, n_actions: int, pad: int):
        self.states = np.asarray(states, dtype=np.int64)
        self.state_len = np.asarray(state_len, dtype=np.int64)
        self.actions = np.asarray(actions, dtype=np.int64)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.next_states = np.asarray(next_states, dtype=np.int64)
        self.terminals = np.asarray(terminals, dtype=bool)
        self.n_actions = n_actions
        self.pad = pad
        for arr in (self.states, self.state_len, self.actions, self.rewards, self.next_states, self.terminals):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def window(self) -> int:
        return self.states.shape[1]

    def batch(self, idx: np.ndarray) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.terminals[idx])

    def all(self) -> Batch:
        return self.batch(np.arange(len(self)))

    def sample(self, rng: np.random.Generator, size: int) -> Batch:
        return self.batch(rng.integers(0, len(self), size=size))

    def transitions(self) -> list[Transition]:
        return [
            Transition(
                tuple(int(x) for x in self.states[i]),
                int(self.state_len[i]),
                int(self.actions[i]),
                float(self.rewards[i]),
                tuple(int(x) for x in self.next_states[i]),
                bool(self.terminals[i]),
            )
            for i in range(len(self))
        ]

    def to_bytes(self) -> bytes:
        parts = [self.states, self.state_len, self.actions, self.rewards, self.next_states, self.terminals.astype(np.int8)]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def prefix_window(items: Sequence[int], end: int, window: int, pad: int) -> np.ndarray:
    """Last ``window`` items of ``items[:end]``, left-padded with ``pad``."""
    out = np.full(window, pad, dtype=np.int64)
    start = max(0, end - window)
    chunk = items[start:end]
    if len(chunk):
        out[window - len(chunk) :] = chunk
    return out


def build_buffer(sessions: Sequence[Session], reward_map: RewardMap, window: int, n_items: int) -> ReplayBuffer:
    """One transition per event; the state is the window of preceding items.

    For a session ``i_1..i_T`` transition ``k`` has state ``i_1..i_{k-1}``,
    action ``i_k`` and next state ``i_1..i_k``; the last one is terminal.
    """
    if window < 1:
        raise ConfigError("window must be >= 1")
    pad = n_items
    n = sum(len(s) for s in sessions)
    if n == 0:
        log.warning("build_buffer: no sessions, returning an empty buffer")
    states = np.full((n, window), pad, dtype=np.int64)
    nxt = np.full((n, window), pad, dtype=np.int64)
    lens = np.zeros(n, dtype=np.int64)
    actions = np.zeros(n, dtype=np.int64)
    rewards = np.zeros(n)
    terminals = np.zeros(n, dtype=bool)
    row = 0
    for s in sessions:
        items = s.items
        T = len(items)
        for k in range(T):
            if items[k] >= n_items or items[k] < 0:
                raise DataError(f"item id {items[k]} outside catalog of size {n_items}")
            states[row] = prefix_window(items, k, window, pad)
            nxt[row] = prefix_window(items, k + 1, window, pad)
            lens[row] = k
            actions[row] = items[k]
            rewards[row] = reward_map.reward(s.purchases[k])
            terminals[row] = k == T - 1
            row += 1
    return ReplayBuffer(states, lens, actions, rewards, nxt, terminals, n_actions=n_items, pad=pad)


# -- splits --------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    seed: int


def split_sessions(sessions: Sequence[Session], seed: int) -> DatasetSplit:
    """Random 80/10/10 split of session ids, deterministic in ``seed``."""
    n = len(sessions)
    if n < 10:
        raise DataError(f"need at least 10 sessions to split, got {n}")
    ids = [s.session_id for s in sessions]
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(0.1 * n))
    n_test = int(round(0.1 * n))
    n_train = n - n_val - n_test
    pick = [ids[i] for i in order]
    return DatasetSplit(
        train=tuple(pick[:n_train]),
        validation=tuple(pick[n_train : n_train + n_val]),
        test=tuple(pick[n_train + n_val :]),
        seed=seed,
    )


def select(sessions: Sequence[Session], ids: Iterable[str]) -> list[Session]:
    """Sessions whose id is in ``ids``, in the original order."""
    wanted = set(ids)
    return [s for s in sessions if s.session_id in wanted]


# -- synthetic RecSys-style logs -------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator for click/purchase sessions with sequential structure.

    Items belong to topics. A session sticks to a topic, the next item follows a
    per-item successor with probability ``p_successor`` and otherwise draws from
    a Zipf popularity profile within the topic. Each item has a purchase
    propensity; purchases end the session with probability ``p_end_after_buy``.
    """

    n_sessions: int = 5000
    n_items: int = 300
    n_topics: int = 6
    p_successor: float = 0.35
    p_switch_topic: float = 0.12
    zipf_a: float = 0.9
    mean_length: float = 6.0
    min_length: int = 3
    max_length: int = 30
    purchase_rate: float = 0.06
    p_end_after_buy: float = 0.5


def synthetic_rows(cfg: SyntheticConfig, seed: int) -> list[tuple[str, str, int, str]]:
    rng = np.random.default_rng(seed)
    n, k = cfg.n_items, cfg.n_topics
    topic_of = rng.integers(0, k, size=n)
    topic_of[:k] = np.arange(k)  # every topic non-empty
    members = [np.flatnonzero(topic_of == t) for t in range(k)]
    pops = []
    for m in members:
        w = 1.0 / np.arange(1, len(m) + 1) ** cfg.zipf_a
        pops.append(rng.permutation(w / w.sum()))
    successor = np.array([rng.choice(members[topic_of[i]]) for i in range(n)])
    # beta(a, b) with mean purchase_rate; heavy-tailed so a few items sell well
    a = 0.5
    buy_prop = np.minimum(rng.beta(a, a * (1.0 - cfg.purchase_rate) / cfg.purchase_rate, size=n), 0.9)
    rows = []
    for s in range(cfg.n_sessions):
        length = cfg.min_length + int(rng.geometric(1.0 / max(cfg.mean_length - cfg.min_length + 1, 1.0))) - 1
        length = min(length, cfg.max_length)
        topic = int(rng.integers(0, k))
        item = int(rng.choice(members[topic], p=pops[topic]))
        ts = 1_000_000 * s
        for t in range(length):
            bought = rng.random() < buy_prop[item]
            rows.append((f"s{s}", f"i{item}", ts + 1000 * t, "purchase" if bought else "click"))
            if bought and t + 1 >= cfg.min_length and rng.random() < cfg.p_end_after_buy:
                break
            if rng.random() < cfg.p_switch_topic:
                topic = int(rng.integers(0, k))
                item = int(rng.choice(members[topic], p=pops[topic]))
            elif rng.random() < cfg.p_successor:
                item = int(successor[item])
            else:
                topic = int(topic_of[item])
                item = int(rng.choice(members[topic], p=pops[topic]))
    return rows


__all__ = [
    "Batch",
    "DatasetSplit",
    "Feedback",
    "IngestConfig",
    "IngestResult",
    "ReplayBuffer",
    "RewardMap",
    "Session",
    "SessionEvent",
    "SyntheticConfig",
    "Transition",
    "build_buffer",
    "ingest_csv",
    "prefix_window",
    "read_item_map",
    "select",
    "sessions_from_rows",
    "split_sessions",
    "synthetic_rows",
    "write_item_map",
    "write_log_csv",
]
