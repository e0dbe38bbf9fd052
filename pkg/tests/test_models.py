import numpy as np
import pytest

from offrec.errors import ConfigError, UsageError
from offrec.models import (
    save_model,
    BehaviorModel,
    CriticModel,
    EncoderConfig,
    PolicyModel,
    gumbel_softmax_sample,
    load_model,
    policy_logprobs,
    q_values,
    sample_gumbel,
    sync_target,
    top_k,
)
from offrec.nn import grad_check
from offrec.nn import ops as T

from conftest import tabular_critic, tabular_policy

STATE = np.array([[0]])


def test_zero_head_is_uniform():
    cfg = EncoderConfig(backbone="gru", embedding_dim=4, hidden_dim=4, window=3)
    m = PolicyModel(cfg, 4, head_scale=0.0)
    lp = policy_logprobs(m, np.array([[4, 0, 1], [2, 3, 1]])).data
    np.testing.assert_allclose(lp, np.log(0.25), atol=1e-12)


def test_logit_shift_invariance():
    a = policy_logprobs(tabular_policy([0.3, -1.0, 2.0]), STATE).data
    b = policy_logprobs(tabular_policy([5.3, 4.0, 7.0]), STATE).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_by_hand():
    p = tabular_policy([1.0, 0.0, 0.0]).probs(STATE)[0]
    np.testing.assert_allclose(p, [0.5761, 0.2119, 0.2119], atol=1e-4)


@pytest.mark.parametrize("backbone", ["gru", "meanpool", "cnn"])
def test_probs_sum_to_one(backbone):
    cfg = EncoderConfig(backbone=backbone, embedding_dim=5, hidden_dim=6, window=4)
    m = PolicyModel(cfg, 7, seed=2)
    states = np.random.default_rng(0).integers(0, 8, size=(20, 4))
    p = m.probs(states)
    assert p.shape == (20, 7)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("backbone", ["gru", "meanpool", "cnn"])
def test_left_padding_does_not_change_logits(backbone):
    short = EncoderConfig(backbone=backbone, embedding_dim=4, hidden_dim=5, window=3)
    long = EncoderConfig(backbone=backbone, embedding_dim=4, hidden_dim=5, window=6)
    a, b = PolicyModel(short, 6, seed=4), PolicyModel(long, 6, seed=4)
    b.params.load_state_dict(a.params.state_dict())
    pad = 6
    la = a.logits(np.array([[pad, 1, 2], [3, 4, 5]])).data
    lb = b.logits(np.array([[pad] * 4 + [1, 2], [pad] * 3 + [3, 4, 5]])).data
    np.testing.assert_allclose(la, lb, atol=1e-12)


def test_extreme_logits_stay_finite():
    lp = policy_logprobs(tabular_policy([800.0, -800.0, 0.0]), STATE).data
    assert np.all(np.isfinite(lp))
    np.testing.assert_allclose(np.exp(lp).sum(), 1.0, atol=1e-12)


def test_gumbel_low_temperature_is_one_hot(rng):
    lp = np.log(np.array([[0.2, 0.5, 0.3]] * 50))
    s = gumbel_softmax_sample(lp, 1e-4, rng)
    y = s.y.data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    hot = np.argmax(lp + s.noise, axis=1)
    np.testing.assert_allclose(y, np.eye(3)[hot], atol=1e-6)


def test_gumbel_argmax_frequencies(rng):
    p = np.array([0.1, 0.2, 0.3, 0.4])
    g = sample_gumbel(rng, (100_000, 4))
    freq = np.bincount(np.argmax(np.log(p) + g, axis=1), minlength=4) / 100_000
    assert 0.5 * np.abs(freq - p).sum() < 0.01


def test_gumbel_symmetry(rng):
    g = sample_gumbel(rng, (100_000, 2))
    assert abs(np.mean(np.argmax(g, axis=1) == 0) - 0.5) < 0.01


@pytest.mark.parametrize("temp", [0.0, -1.0])
def test_gumbel_bad_temperature(temp, rng):
    with pytest.raises(ConfigError):
        gumbel_softmax_sample(np.zeros((1, 3)), temp, rng)


def test_gumbel_needs_randomness():
    with pytest.raises(UsageError):
        gumbel_softmax_sample(np.zeros((1, 3)), 1.0)


def test_gumbel_gradient_matches_fd(toy_gru, rng):
    cfg, policy, _, _ = toy_gru
    states = np.array([[3, 0, 1], [2, 1, 0]])
    noise = sample_gumbel(rng, (2, 3))
    w = np.array([[0.3, -1.2, 0.5], [1.0, 0.2, -0.7]])

    def loss(store):
        y = gumbel_softmax_sample(policy_logprobs(policy, states), 0.7, noise=noise).y
        return (y * w).sum()

    assert grad_check(loss, policy.params) < 1e-4


def test_zero_critic_gives_zero_q():
    q = q_values(tabular_critic([0.0, 0.0, 0.0]), STATE)
    np.testing.assert_array_equal(q.data, 0.0)


def test_target_after_sync(toy_gru):
    _, _, critic, _ = toy_gru
    for _, t in critic.params.items():
        t.data = t.data + 0.1
    states = np.array([[0, 1, 2]])
    assert not np.array_equal(q_values(critic, states).data, q_values(critic, states, use_target=True).data)
    sync_target(critic, "hard", period=1)
    np.testing.assert_array_equal(q_values(critic, states).data, q_values(critic, states, use_target=True).data)


def test_mean_q_gradient_matches_fd(toy_gru):
    _, _, critic, _ = toy_gru
    states = np.array([[3, 0, 1], [2, 1, 0], [3, 3, 2]])
    assert grad_check(lambda s: T.mean(q_values(critic, states)), critic.params) < 1e-4


def _scalar_critic(value, target):
    c = tabular_critic([0.0])
    c.params["head.b"].data = np.array([value])
    c.target["head.b"].data = np.array([target])
    return c


def test_polyak_half():
    c = sync_target(_scalar_critic(2.0, 0.0), "polyak", tau=0.5)
    np.testing.assert_allclose(c.target["head.b"].data, [1.0])


def test_polyak_one_is_hard_copy():
    a = sync_target(_scalar_critic(2.0, 0.0), "polyak", tau=1.0)
    b = sync_target(_scalar_critic(2.0, 0.0), "hard", period=1)
    np.testing.assert_array_equal(a.target["head.b"].data, b.target["head.b"].data)


def test_hard_period_three():
    c = _scalar_critic(2.0, 0.0)
    for _ in range(2):
        sync_target(c, "hard", period=3)
        assert c.target["head.b"].data[0] == 0.0
    sync_target(c, "hard", period=3)
    assert c.target["head.b"].data[0] == 2.0


@pytest.mark.parametrize("kwargs", [dict(mode="hard", period=0), dict(mode="polyak", tau=0.0), dict(mode="polyak", tau=1.5), dict(mode="soft")])
def test_sync_bad_parameters(kwargs):
    with pytest.raises(ConfigError):
        sync_target(_scalar_critic(1.0, 0.0), **kwargs)


def test_top_k_examples():
    assert top_k(tabular_policy([0.0] * 5), STATE, 3)[0].tolist() == [0, 1, 2]
    assert top_k(tabular_policy(np.log([0.1, 0.7, 0.2])), STATE, 1)[0].tolist() == [1]
    full = top_k(tabular_policy([0.4, -0.2, 1.0, 0.0]), STATE, 4)[0]
    assert sorted(full.tolist()) == [0, 1, 2, 3]
    assert full.tolist() == [2, 0, 3, 1]


@pytest.mark.parametrize("k", [0, 4])
def test_top_k_range(k):
    with pytest.raises(UsageError):
        top_k(tabular_policy([0.0] * 3), STATE, k)


def test_top_k_shift_invariant():
    logits = np.random.default_rng(1).normal(size=9)
    assert np.array_equal(top_k(tabular_policy(logits), STATE, 9), top_k(tabular_policy(logits + 13.0), STATE, 9))


def test_encoder_config_errors():
    with pytest.raises(ConfigError):
        EncoderConfig(backbone="transformer")
    with pytest.raises(ConfigError):
        EncoderConfig(hidden_dim=0)


def test_frozen_behavior_is_immutable(toy_gru):
    _, _, _, behavior = toy_gru
    assert behavior.frozen
    with pytest.raises(ValueError):
        behavior.params["head.b"].data[0] = 1.0


@pytest.mark.parametrize("cls", [PolicyModel, CriticModel, BehaviorModel])
def test_save_load_roundtrip(tmp_path, cls):
    cfg = EncoderConfig(backbone="cnn", embedding_dim=3, hidden_dim=4, window=5)
    m = cls(cfg, 6, seed=9)
    p = tmp_path / "m.orec"
    save_model(p, m, "test", {"note": 1})
    loaded, meta = load_model(p)
    assert type(loaded) is cls and meta["note"] == 1 and meta["window"] == 5
    states = np.array([[6, 6, 0, 1, 2]])
    if cls is CriticModel:
        np.testing.assert_array_equal(q_values(loaded, states).data, q_values(m, states).data)
        np.testing.assert_array_equal(q_values(loaded, states, True).data, q_values(m, states, True).data)
    else:
        np.testing.assert_array_equal(loaded.logits(states).data, m.logits(states).data)
