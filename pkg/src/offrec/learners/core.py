"""
Losses and single-step updates for every learner.

Each ``*_loss`` returns a scalar ``Tensor`` plus diagnostics, so it can be
handed to ``grad_check`` unchanged. Each ``*_update`` wraps the matching loss
with backward, one optimizer step and an :class:`UpdateReport`.

Sign conventions: rewards are non-positive, ``Q`` approximates the soft
return, and the actor minimises ``E_y[y . (log pi - Q / alpha)]`` over
Gumbel-Softmax relaxed samples ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from ..data import Batch
from ..errors import ConfigError, NumericError
from ..models import BehaviorModel, CriticModel, PolicyModel, gumbel_softmax_sample, policy_logprobs, q_values, sample_gumbel, sync_target
from ..nn import ParamStore, Tensor, adam_step, fill_missing_grads, no_grad, sgd_step
from ..nn import ops as T


@dataclass
class LearnerConfig:
    alpha: float = 1.0
    gamma: float = 0.99
    gumbel_temp: float = 1.0
    gumbel_temp_final: float = 0.1
    beta: float = 1.0
    epsilon: float = 1.0
    delta: float = 0.1
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    lr_dual: float = 1e-2
    batch_size: int = 256
    target_sync: str = "hard"
    target_period: int = 500
    tau: float = 0.005
    gumbel_samples: int = 1
    critic_expectation: str = "exact"
    actor_estimator: str = "gumbel"
    adaptive_beta: bool = True
    pc_use_target: bool = True
    re_coef: float | None = None
    prior_floor: float = 1e-8
    optimizer: str = "adam"
    critic_hidden_factor: int = 2

    def __post_init__(self):
        checks = [
            (self.alpha > 0, "alpha must be > 0"),
            (0.0 <= self.gamma <= 1.0, "gamma must be in [0, 1]"),
            (self.gumbel_temp > 0 and self.gumbel_temp_final > 0, "Gumbel temperatures must be > 0"),
            (self.beta >= 0, "beta must be >= 0"),
            (self.epsilon > 0, "epsilon must be > 0"),
            (0.0 <= self.delta <= 1.0, "delta must be in [0, 1]"),
            (min(self.lr_actor, self.lr_critic, self.lr_dual) > 0, "learning rates must be > 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.target_sync in ("hard", "polyak"), "target_sync must be 'hard' or 'polyak'"),
            (self.target_period >= 1, "target_period must be >= 1"),
            (0.0 < self.tau <= 1.0, "tau must be in (0, 1]"),
            (self.gumbel_samples >= 1, "gumbel_samples must be >= 1"),
            (self.critic_expectation in ("exact", "sample"), "critic_expectation must be 'exact' or 'sample'"),
            (self.actor_estimator in ("gumbel", "exact"), "actor_estimator must be 'gumbel' or 'exact'"),
            (self.re_coef is None or self.re_coef >= 0, "re_coef must be >= 0"),
            (0.0 < self.prior_floor < 1.0, "prior_floor must be in (0, 1)"),
            (self.optimizer in ("adam", "sgd"), "optimizer must be 'adam' or 'sgd'"),
            (self.critic_hidden_factor >= 1, "critic_hidden_factor must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown learner fields: {sorted(unknown)}")
        return cls(**d)

    def gumbel_temperature(self, progress: float) -> float:
        """Linear anneal from ``gumbel_temp`` to ``gumbel_temp_final``."""
        p = min(max(progress, 0.0), 1.0)
        return self.gumbel_temp + (self.gumbel_temp_final - self.gumbel_temp) * p


@dataclass
class UpdateReport:
    critic_loss: float = float("nan")
    actor_loss: float = float("nan")
    aux: dict[str, float] = field(default_factory=dict)
    step: int = 0

    def check_finite(self, batch: Batch | None = None) -> "UpdateReport":
        """Raise NumericError (carrying ``batch``) if a produced value is NaN or infinite."""
        values = {k: getattr(self, k) for k in self.produced}
        values.update(self.aux)
        bad = {k: v for k, v in values.items() if not np.isfinite(v)}
        if bad:
            err = NumericError(f"non-finite values at step {self.step}: {bad}")
            err.batch = batch
            raise err
        return self

    @property
    def produced(self) -> tuple[str, ...]:
        return tuple(k for k in ("critic_loss", "actor_loss") if not np.isnan(getattr(self, k)))


@dataclass
class DualState:
    beta: float


def _optimize(store: ParamStore, loss: Tensor, lr: float, optimizer: str = "adam") -> None:
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss {float(loss.data)}")
    store.zero_grad()
    loss.backward()
    fill_missing_grads(store)
    if optimizer == "sgd":
        sgd_step(store, lr)
    else:
        adam_step(store, lr)


def _report(critic=None, actor=None, aux=None, step=0) -> UpdateReport:
    return UpdateReport(
        critic_loss=float("nan") if critic is None else float(critic),
        actor_loss=float("nan") if actor is None else float(actor),
        aux=dict(aux or {}),
        step=step,
    )


def clamped_prior(behavior: BehaviorModel, states: np.ndarray, floor: float) -> np.ndarray:
    """``log pi_b(.|s)`` clamped below at ``log(floor)``."""
    return behavior.log_probs_np(states, floor=floor)


# -- supervised baseline -----------------------------------------------------------------


def sl_loss(policy: PolicyModel, batch: Batch) -> tuple[Tensor, dict]:
    lp = policy_logprobs(policy, batch.states)
    ce = -T.gather_last(lp, batch.actions).mean()
    return ce, {}


def sl_update(policy: PolicyModel, batch: Batch, lr: float = 1e-3, optimizer: str = "adam") -> UpdateReport:
    if len(batch) == 0:
        raise ConfigError("empty batch")
    if getattr(policy, "frozen", False):
        from ..errors import UsageError

        raise UsageError("cannot update a frozen model")
    loss, _ = sl_loss(policy, batch)
    _optimize(policy.params, loss, lr, optimizer)
    return _report(actor=loss.data, step=policy.params.step)


# -- DQN baseline --------------------------------------------------------------------------


def dqn_targets(critic: CriticModel, batch: Batch, gamma: float) -> np.ndarray:
    with no_grad():
        q_next = q_values(critic, batch.next_states, use_target=True).data
    boot = np.where(batch.terminals, 0.0, q_next.max(axis=1))
    return batch.rewards + gamma * boot


def dqn_loss(critic: CriticModel, batch: Batch, gamma: float, y: np.ndarray | None = None) -> tuple[Tensor, dict]:
    y = dqn_targets(critic, batch, gamma) if y is None else y
    q = T.gather_last(q_values(critic, batch.states), batch.actions)
    loss = 0.5 * T.square(q - y).mean()
    return loss, {"target_mean": float(np.mean(y))}


def dqn_update(critic: CriticModel, batch: Batch, gamma: float, lr: float = 1e-3, cfg: LearnerConfig | None = None) -> UpdateReport:
    if len(batch) == 0:
        raise ConfigError("empty batch")
    loss, aux = dqn_loss(critic, batch, gamma)
    _optimize(critic.params, loss, lr, cfg.optimizer if cfg else "adam")
    if cfg is not None:
        sync_target(critic, cfg.target_sync, cfg.target_period, cfg.tau)
    return _report(critic=loss.data, aux=aux, step=critic.params.step)


# -- soft critic ---------------------------------------------------------------------------


def soft_targets(
    critic: CriticModel,
    policy: PolicyModel,
    batch: Batch,
    cfg: LearnerConfig,
    *,
    rewards: np.ndarray | None = None,
    behavior: BehaviorModel | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """``y = r + gamma * E_{a'~pi}[Q_target(s', a') (+ alpha log pi_b(a'|s')) - alpha log pi(a'|s')]``.

    Terminal transitions get ``y = r``. With ``behavior`` the clamped logging
    prior enters the bootstrap (dual constraints).
    """
    r = batch.rewards if rewards is None else rewards
    with no_grad():
        lp_next = policy_logprobs(policy, batch.next_states).data
        q_next = q_values(critic, batch.next_states, use_target=True).data
    inner = q_next - cfg.alpha * lp_next
    if behavior is not None:
        inner = inner + cfg.alpha * clamped_prior(behavior, batch.next_states, cfg.prior_floor)
    if cfg.critic_expectation == "exact":
        v = (np.exp(lp_next) * inner).sum(axis=1)
    else:
        if rng is None:
            raise ConfigError("sampled critic expectation needs an rng")
        g = sample_gumbel(rng, lp_next.shape)
        a_next = np.argmax(lp_next + g, axis=1)
        v = inner[np.arange(len(a_next)), a_next]
    return r + cfg.gamma * np.where(batch.terminals, 0.0, v)


def soft_critic_loss(critic: CriticModel, batch: Batch, y: np.ndarray) -> tuple[Tensor, dict]:
    q = T.gather_last(q_values(critic, batch.states), batch.actions)
    loss = 0.5 * T.square(q - y).mean()
    return loss, {"target_mean": float(np.mean(y))}


def sdac_critic_update(
    critic: CriticModel,
    policy: PolicyModel,
    batch: Batch,
    cfg: LearnerConfig,
    *,
    rewards: np.ndarray | None = None,
    behavior: BehaviorModel | None = None,
    rng: np.random.Generator | None = None,
) -> UpdateReport:
    if len(batch) == 0:
        raise ConfigError("empty batch")
    y = soft_targets(critic, policy, batch, cfg, rewards=rewards, behavior=behavior, rng=rng)
    loss, aux = soft_critic_loss(critic, batch, y)
    _optimize(critic.params, loss, cfg.lr_critic, cfg.optimizer)
    sync_target(critic, cfg.target_sync, cfg.target_period, cfg.tau)
    return _report(critic=loss.data, aux=aux, step=critic.params.step)


# -- actor ------------------------------------------------------------------------------------


def actor_loss(
    policy: PolicyModel,
    critic: CriticModel,
    states: np.ndarray,
    cfg: LearnerConfig,
    *,
    temperature: float | None = None,
    noise: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    prior: np.ndarray | None = None,
    q: np.ndarray | None = None,
) -> tuple[Tensor, dict, Tensor]:
    """Policy-improvement loss ``E_y[y . (log pi - log prior - Q/alpha)]``.

    ``noise`` has shape (M, batch, n_actions); pass it explicitly for
    reproducible gradient checks. Returns (loss, diagnostics, log pi).
    """
    lp = policy_logprobs(policy, states)
    if q is None:
        with no_grad():
            q = q_values(critic, states).data
    score = lp - q / cfg.alpha
    if prior is not None:
        score = score - prior
    if cfg.actor_estimator == "exact":
        loss = (T.exp(lp) * score).sum(axis=1).mean()
    else:
        tau = cfg.gumbel_temp if temperature is None else temperature
        if noise is None:
            if rng is None:
                raise ConfigError("Gumbel actor loss needs noise or an rng")
            noise = sample_gumbel(rng, (cfg.gumbel_samples,) + lp.shape)
        terms = []
        for m in range(noise.shape[0]):
            y = gumbel_softmax_sample(lp, tau, noise=noise[m]).y
            terms.append((y * score).sum(axis=1).mean())
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        if len(terms) > 1:
            loss = loss * (1.0 / len(terms))
    probs = np.exp(lp.data)
    entropy = float(-(probs * lp.data).sum(axis=1).mean())
    return loss, {"entropy": entropy}, lp


def sdac_actor_update(policy, critic, states, cfg: LearnerConfig, *, temperature=None, noise=None, rng=None) -> UpdateReport:
    loss, aux, _ = actor_loss(policy, critic, states, cfg, temperature=temperature, noise=noise, rng=rng)
    _optimize(policy.params, loss, cfg.lr_actor, cfg.optimizer)
    return _report(actor=loss.data, aux=aux, step=policy.params.step)


def support_mask(behavior: BehaviorModel, states: np.ndarray, delta: float) -> np.ndarray:
    """Actions the logging policy picks with probability <= delta."""
    with no_grad():
        pb = np.exp(behavior.log_probs_np(states))
    return pb <= delta


def sc_loss(policy, critic, behavior, states, cfg: LearnerConfig, **kw) -> tuple[Tensor, dict]:
    loss, aux, lp = actor_loss(policy, critic, states, cfg, **kw)
    mask = support_mask(behavior, states, cfg.delta)
    if mask.any():
        penalty = (T.exp(lp) * mask.astype(np.float64)).sum(axis=1).mean()
        aux["penalty"] = float(penalty.data)
        loss = loss + cfg.beta * penalty
    else:
        aux["penalty"] = 0.0
    return loss, aux


def sc_actor_update(policy, critic, behavior, states, cfg: LearnerConfig, **kw) -> UpdateReport:
    loss, aux = sc_loss(policy, critic, behavior, states, cfg, **kw)
    _optimize(policy.params, loss, cfg.lr_actor, cfg.optimizer)
    return _report(actor=loss.data, aux=aux, step=policy.params.step)


def sr_loss(policy, critic, batch: Batch, cfg: LearnerConfig, beta: float, **kw) -> tuple[Tensor, dict]:
    loss, aux, lp = actor_loss(policy, critic, batch.states, cfg, **kw)
    ce = -T.gather_last(lp, batch.actions).mean()
    aux["ce"] = float(ce.data)
    return loss + beta * ce, aux


def sr_actor_update(policy, critic, batch: Batch, cfg: LearnerConfig, dual_state: DualState, **kw) -> UpdateReport:
    """Actor step on ``L_pi + beta * CE`` then dual ascent on beta.

    The constraint is measured as the logged cross-entropy ``CE``, which
    differs from ``KL(pi_b || pi)`` only by the (theta-independent) entropy of
    the logging policy, so ``epsilon`` is a cross-entropy budget.
    """
    loss, aux = sr_loss(policy, critic, batch, cfg, dual_state.beta, **kw)
    _optimize(policy.params, loss, cfg.lr_actor, cfg.optimizer)
    residual = aux["ce"] - cfg.epsilon
    if cfg.adaptive_beta:
        dual_state.beta = max(0.0, dual_state.beta + cfg.lr_dual * residual)
    aux.update(residual=residual, beta=dual_state.beta)
    return _report(actor=loss.data, aux=aux, step=policy.params.step)


def pc_weights(critic: CriticModel, batch: Batch, beta: float, use_target: bool = True) -> tuple[np.ndarray, int]:
    """``exp(Q(s,a)/beta)`` clipped to [0, 1]; also returns how many needed clipping."""
    with no_grad():
        q = q_values(critic, batch.states, use_target=use_target).data[np.arange(len(batch)), batch.actions]
    raw = np.exp(np.minimum(q / beta, 50.0))
    return np.clip(raw, 0.0, 1.0), int((raw > 1.0).sum())


def pc_loss(policy, critic, batch: Batch, cfg: LearnerConfig, weights: np.ndarray | None = None) -> tuple[Tensor, dict]:
    if not cfg.beta > 0:
        raise ConfigError("policy constraints need beta > 0")
    violations = 0
    if weights is None:
        weights, violations = pc_weights(critic, batch, cfg.beta, cfg.pc_use_target)
    lp = policy_logprobs(policy, batch.states)
    loss = -(T.gather_last(lp, batch.actions) * weights).mean()
    return loss, {"mean_weight": float(weights.mean()), "weight_violations": float(violations)}


def pc_actor_update(policy, critic, batch: Batch, cfg: LearnerConfig) -> UpdateReport:
    loss, aux = pc_loss(policy, critic, batch, cfg)
    _optimize(policy.params, loss, cfg.lr_actor, cfg.optimizer)
    return _report(actor=loss.data, aux=aux, step=policy.params.step)


def dc_actor_loss(policy, critic, behavior, states, cfg: LearnerConfig, **kw) -> tuple[Tensor, dict]:
    prior = clamped_prior(behavior, states, cfg.prior_floor)
    loss, aux, _ = actor_loss(policy, critic, states, cfg, prior=prior, **kw)
    return loss, aux


def dc_update(policy, critic, behavior, batch: Batch, cfg: LearnerConfig, *, temperature=None, noise=None, rng=None, critic_rng=None) -> UpdateReport:
    """Critic step with the logging prior in the bootstrap, then the prior-relative actor step."""
    c = sdac_critic_update(critic, policy, batch, cfg, behavior=behavior, rng=critic_rng)
    loss, aux = dc_actor_loss(policy, critic, behavior, batch.states, cfg, temperature=temperature, noise=noise, rng=rng)
    _optimize(policy.params, loss, cfg.lr_actor, cfg.optimizer)
    aux.update(c.aux)
    return _report(critic=c.critic_loss, actor=loss.data, aux=aux, step=policy.params.step)


def extrapolated_rewards(behavior: BehaviorModel, batch: Batch, coef: float, floor: float) -> np.ndarray:
    """``r + coef * log pi_b(a|s)`` with the prior clamped at ``log(floor)``."""
    if coef == 0.0:
        return batch.rewards
    lp = clamped_prior(behavior, batch.states, floor)[np.arange(len(batch)), batch.actions]
    return batch.rewards + coef * lp


def re_update(policy, critic, behavior, batch: Batch, cfg: LearnerConfig, *, temperature=None, noise=None, rng=None, critic_rng=None) -> UpdateReport:
    coef = cfg.alpha if cfg.re_coef is None else cfg.re_coef
    r_hat = extrapolated_rewards(behavior, batch, coef, cfg.prior_floor)
    c = sdac_critic_update(critic, policy, batch, cfg, rewards=r_hat, rng=critic_rng)
    a = sdac_actor_update(policy, critic, batch.states, cfg, temperature=temperature, noise=noise, rng=rng)
    aux = {**c.aux, **a.aux, "reward_hat_mean": float(np.mean(r_hat))}
    return _report(critic=c.critic_loss, actor=a.actor_loss, aux=aux, step=policy.params.step)
