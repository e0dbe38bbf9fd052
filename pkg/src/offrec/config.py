"""Experiment configuration: TOML (or JSON) files with one table per concern.

Example::

    [data]
    source = "synthetic"      # or "csv" with path = "...", or "fixture" with fixture = "..."
    n_sessions = 5000
    [learner]
    kind = "sc"
    delta = 0.05
    beta = 1.0
    [run]
    seeds = [0, 1, 2]

Unknown keys are rejected so typos surface as config errors.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .data import IngestConfig, RewardMap, SyntheticConfig
from .errors import ConfigError
from .learners import KINDS, BehaviorConfig, LearnerConfig, TrainConfig
from .models import EncoderConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# fields a learner kind must set explicitly: the defaults are not meaningful for it
REQUIRED = {"sc": ("delta", "beta"), "sr": ("epsilon",), "pc": ("beta",)}
SWEEP_PARAMS = {"delta": ("sc",), "beta": ("sc", "sr", "pc"), "alpha": ("sdac", "sc", "sr", "pc", "dc", "re"), "epsilon": ("sr",)}


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    fixture: str = ""
    seed: int = 0
    window: int = 10
    min_length: int = 3
    purchase_sessions_only: bool = False
    max_sessions: int = 0
    n_sessions: int = 5000
    n_items: int = 300
    click_reward: float = 0.2
    purchase_reward: float = 1.0

    def __post_init__(self):
        if self.source not in ("synthetic", "csv", "fixture"):
            raise ConfigError("data.source: must be 'synthetic', 'csv' or 'fixture'")
        if self.source == "fixture" and self.window != 1:
            raise ConfigError("data.window: fixture logs use single-token states, window must be 1")
        if self.window < 1:
            raise ConfigError("data.window: must be >= 1")
        if self.min_length < 1:
            raise ConfigError("data.min_length: must be >= 1")
        if self.max_sessions < 0:
            raise ConfigError("data.max_sessions: must be >= 0")

    def reward_map(self) -> RewardMap:
        return RewardMap(self.click_reward, self.purchase_reward)

    def ingest_config(self) -> IngestConfig:
        return IngestConfig(min_length=self.min_length, purchase_sessions_only=self.purchase_sessions_only)

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(n_sessions=self.n_sessions, n_items=self.n_items, min_length=self.min_length)


@dataclass
class RunConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = "runs"
    workers: int = 1

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("run.seeds: at least one seed required")
        if self.workers < 1:
            raise ConfigError("run.workers: must be >= 1")


@dataclass
class SweepConfig:
    param: str = "beta"
    values: list[float] = field(default_factory=list)
    include_adaptive: bool = True

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError(f"sweep.param: must be one of {sorted(SWEEP_PARAMS)}")
        self.values = [float(v) for v in self.values]


@dataclass
class ExperimentConfig:
    kind: str
    data: DataConfig
    encoder: EncoderConfig
    learner: LearnerConfig
    behavior: BehaviorConfig
    train: TrainConfig
    run: RunConfig
    sweep: SweepConfig

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "encoder": asdict(self.encoder),
            "learner": {"kind": self.kind, **{k: v for k, v in asdict(self.learner).items() if v is not None}},
            "behavior": asdict(self.behavior),
            "train": {**asdict(self.train), "ks": list(self.train.ks)},
            "run": asdict(self.run),
            "sweep": asdict(self.sweep),
        }

    def with_learner(self, kind: str | None = None, **overrides) -> "ExperimentConfig":
        d = self.to_dict()
        if kind is not None:
            d["learner"]["kind"] = kind
        d["learner"].update(overrides)
        return from_dict(d, check_required=False)


def _build(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown field")
    try:
        return cls(**values)
    except ConfigError as err:
        msg = str(err)
        raise ConfigError(msg if msg.startswith(section) else f"{section}: {msg}") from err
    except TypeError as err:
        raise ConfigError(f"{section}: {err}") from err


def from_dict(d: dict, check_required: bool = True) -> ExperimentConfig:
    unknown = sorted(set(d) - {"data", "encoder", "learner", "behavior", "train", "run", "sweep"})
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section")
    learner = dict(d.get("learner", {}))
    kind = learner.pop("kind", "sdac")
    if kind not in KINDS:
        raise ConfigError(f"learner.kind: must be one of {KINDS}, got {kind!r}")
    if check_required:
        for name in REQUIRED.get(kind, ()):
            if name not in learner:
                raise ConfigError(f"learner.{name}: required for learner {kind!r}")
    train = dict(d.get("train", {}))
    if "ks" in train:
        train["ks"] = tuple(train["ks"])
    cfg = ExperimentConfig(
        kind=kind,
        data=_build(DataConfig, "data", d.get("data", {})),
        encoder=_build(EncoderConfig, "encoder", d.get("encoder", {})),
        learner=_build(LearnerConfig, "learner", learner),
        behavior=_build(BehaviorConfig, "behavior", d.get("behavior", {})),
        train=_build(TrainConfig, "train", train),
        run=_build(RunConfig, "run", d.get("run", {})),
        sweep=_build(SweepConfig, "sweep", d.get("sweep", {})),
    )
    if cfg.encoder.window != cfg.data.window:
        raise ConfigError(f"encoder.window: {cfg.encoder.window} does not match data.window {cfg.data.window}")
    if cfg.data.source == "csv" and not Path(cfg.data.path).is_file():
        raise ConfigError(f"data.path: file not found: {cfg.data.path!r}")
    if cfg.data.source == "fixture":
        from .oracle import FIXTURES

        if cfg.data.fixture not in FIXTURES:
            raise ConfigError(f"data.fixture: must be one of {FIXTURES}, got {cfg.data.fixture!r}")
    return cfg


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        return json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err


def presets() -> list[str]:
    return sorted(p.name[: -len(".toml")] for p in resources.files("offrec").joinpath("configs").iterdir() if p.name.endswith(".toml"))


def preset(name: str = "desk") -> dict:
    if name not in presets():
        raise ConfigError(f"unknown preset {name!r}; bundled: {presets()}")
    text = resources.files("offrec").joinpath("configs", f"{name}.toml").read_text()
    return tomllib.loads(text)


def load_config(path: str | Path | None = None, check_required: bool = True) -> ExperimentConfig:
    """Read a config file (or the bundled desk preset) and apply ``OFFREC_OUT``."""
    d = preset() if path is None else read_config_file(path)
    env_out = os.environ.get("OFFREC_OUT")
    if env_out:
        d.setdefault("run", {})["out"] = env_out
    return from_dict(d, check_required=check_required)
