"""Learner objects: own the models and RNG streams, expose ``update(batch)``."""

from __future__ import annotations

import numpy as np

from ..data import Batch
from ..errors import ConfigError
from ..evaluation import RankingSource, ranking_source_from_policy, ranking_source_from_q
from ..models import BehaviorModel, CriticModel, EncoderConfig, PolicyModel
from . import core
from .core import DualState, LearnerConfig, UpdateReport

KINDS = ("sl", "dqn", "sdac", "sc", "sr", "pc", "dc", "re")
NEEDS_BEHAVIOR = ("sc", "dc", "re")

# independent RNG streams per purpose, so learners that share a component
# (e.g. SL and PC actors) also share its initialization and noise
_ACTOR_INIT, _CRITIC_INIT, _ACTOR_NOISE, _CRITIC_NOISE = 1, 2, 3, 5


def stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose])


class Learner:
    kind = ""
    has_actor = True
    has_critic = True

    def __init__(
        self,
        n_actions: int,
        encoder: EncoderConfig,
        cfg: LearnerConfig | None = None,
        *,
        seed: int = 0,
        n_tokens: int | None = None,
        behavior: BehaviorModel | None = None,
        head_scale: float | None = None,
    ):
        self.cfg = cfg or LearnerConfig()
        self.seed = seed
        self.n_actions = n_actions
        if self.kind in NEEDS_BEHAVIOR:
            if behavior is None:
                raise ConfigError(f"learner {self.kind!r} needs a trained behavior model")
            if not getattr(behavior, "frozen", False):
                raise ConfigError("behavior model must be frozen before use")
        self.behavior = behavior
        self.policy = PolicyModel(encoder, n_actions, n_tokens, rng=stream(seed, _ACTOR_INIT), head_scale=head_scale) if self.has_actor else None
        self.critic = (
            CriticModel(encoder.scaled(self.cfg.critic_hidden_factor), n_actions, n_tokens, rng=stream(seed, _CRITIC_INIT), head_scale=head_scale)
            if self.has_critic
            else None
        )
        self.noise_rng = stream(seed, _ACTOR_NOISE)
        self.critic_rng = stream(seed, _CRITIC_NOISE)
        self.steps = 0

    # -- contract -------------------------------------------------------------------------
    def update(self, batch: Batch, progress: float = 0.0) -> UpdateReport:
        self.steps += 1
        report = self._update(batch, progress)
        report.step = self.steps
        return report.check_finite(batch)

    def _update(self, batch: Batch, progress: float) -> UpdateReport:
        raise NotImplementedError

    def ranking_source(self) -> RankingSource:
        return ranking_source_from_policy(self.policy)

    def models(self) -> dict:
        out = {}
        if self.policy is not None:
            out["policy"] = self.policy
        if self.critic is not None:
            out["critic"] = self.critic
        return out

    def snapshot(self) -> dict:
        snap = {}
        for name, m in self.models().items():
            snap[name] = m.params.state_dict()
            if isinstance(m, CriticModel):
                snap[name + ".target"] = m.target.state_dict()
        return snap

    def restore(self, snap: dict) -> None:
        for name, m in self.models().items():
            m.params.load_state_dict(snap[name])
            if isinstance(m, CriticModel):
                m.target.load_state_dict(snap[name + ".target"])

    @property
    def beta(self) -> float:
        return self.cfg.beta

    # -- helpers ----------------------------------------------------------------------------
    def _actor_kw(self, progress: float) -> dict:
        return {"temperature": self.cfg.gumbel_temperature(progress), "rng": self.noise_rng}

    def _critic_rng(self):
        return self.critic_rng if self.cfg.critic_expectation == "sample" else None


class SLLearner(Learner):
    kind = "sl"
    has_critic = False

    def _update(self, batch, progress):
        return core.sl_update(self.policy, batch, self.cfg.lr_actor, self.cfg.optimizer)


class DQNLearner(Learner):
    kind = "dqn"
    has_actor = False

    def _update(self, batch, progress):
        return core.dqn_update(self.critic, batch, self.cfg.gamma, self.cfg.lr_critic, self.cfg)

    def ranking_source(self) -> RankingSource:
        return ranking_source_from_q(self.critic)


class SDACLearner(Learner):
    kind = "sdac"

    def _update(self, batch, progress):
        c = core.sdac_critic_update(self.critic, self.policy, batch, self.cfg, rng=self._critic_rng())
        a = self._actor_step(batch, progress)
        return UpdateReport(c.critic_loss, a.actor_loss, {**c.aux, **a.aux})

    def _actor_step(self, batch, progress) -> UpdateReport:
        return core.sdac_actor_update(self.policy, self.critic, batch.states, self.cfg, **self._actor_kw(progress))


class SCLearner(SDACLearner):
    kind = "sc"

    def _actor_step(self, batch, progress):
        return core.sc_actor_update(self.policy, self.critic, self.behavior, batch.states, self.cfg, **self._actor_kw(progress))


class SRLearner(SDACLearner):
    kind = "sr"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.dual = DualState(self.cfg.beta)

    @property
    def beta(self) -> float:
        return self.dual.beta

    def _actor_step(self, batch, progress):
        return core.sr_actor_update(self.policy, self.critic, batch, self.cfg, self.dual, **self._actor_kw(progress))

    def snapshot(self) -> dict:
        snap = super().snapshot()
        snap["dual.beta"] = self.dual.beta
        return snap

    def restore(self, snap: dict) -> None:
        super().restore(snap)
        self.dual.beta = snap["dual.beta"]


class PCLearner(SDACLearner):
    kind = "pc"

    def _actor_step(self, batch, progress):
        return core.pc_actor_update(self.policy, self.critic, batch, self.cfg)


class DCLearner(Learner):
    kind = "dc"

    def _update(self, batch, progress):
        return core.dc_update(self.policy, self.critic, self.behavior, batch, self.cfg, critic_rng=self._critic_rng(), **self._actor_kw(progress))


class RELearner(Learner):
    kind = "re"

    def _update(self, batch, progress):
        return core.re_update(self.policy, self.critic, self.behavior, batch, self.cfg, critic_rng=self._critic_rng(), **self._actor_kw(progress))


LEARNERS = {cls.kind: cls for cls in (SLLearner, DQNLearner, SDACLearner, SCLearner, SRLearner, PCLearner, DCLearner, RELearner)}


def make_learner(kind: str, n_actions: int, encoder: EncoderConfig, cfg: LearnerConfig | None = None, **kw) -> Learner:
    if kind not in LEARNERS:
        raise ConfigError(f"unknown learner {kind!r}; choose from {KINDS}")
    return LEARNERS[kind](n_actions, encoder, cfg, **kw)
