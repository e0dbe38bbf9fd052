"""Baselines, the soft actor-critic and its offline variants, and the training driver."""

from .agents import KINDS, LEARNERS, NEEDS_BEHAVIOR, Learner, make_learner
from .core import (
    DualState,
    LearnerConfig,
    UpdateReport,
    actor_loss,
    dc_actor_loss,
    dc_update,
    dqn_loss,
    dqn_targets,
    dqn_update,
    extrapolated_rewards,
    pc_actor_update,
    pc_loss,
    pc_weights,
    re_update,
    sc_actor_update,
    sc_loss,
    sdac_actor_update,
    sdac_critic_update,
    sl_loss,
    sl_update,
    soft_critic_loss,
    soft_targets,
    sr_actor_update,
    sr_loss,
    support_mask,
)
from .training import BehaviorConfig, BehaviorResult, TrainConfig, TrainResult, cross_entropy, train, train_behavior

__all__ = [
    "KINDS",
    "LEARNERS",
    "NEEDS_BEHAVIOR",
    "BehaviorConfig",
    "BehaviorResult",
    "DualState",
    "Learner",
    "LearnerConfig",
    "TrainConfig",
    "TrainResult",
    "UpdateReport",
    "actor_loss",
    "cross_entropy",
    "dc_actor_loss",
    "dc_update",
    "dqn_loss",
    "dqn_targets",
    "dqn_update",
    "extrapolated_rewards",
    "make_learner",
    "pc_actor_update",
    "pc_loss",
    "pc_weights",
    "re_update",
    "sc_actor_update",
    "sc_loss",
    "sdac_actor_update",
    "sdac_critic_update",
    "sl_loss",
    "sl_update",
    "soft_critic_loss",
    "soft_targets",
    "sr_actor_update",
    "sr_loss",
    "support_mask",
    "train",
    "train_behavior",
]
