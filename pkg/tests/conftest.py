import numpy as np
import pytest

from offrec.data import Session
from offrec.models import BehaviorModel, CriticModel, EncoderConfig, PolicyModel

# single-state tabular encoder: token 0 is the state, token 1 is PAD
ONE_HOT = EncoderConfig(backbone="meanpool", one_hot=True, window=1, embedding_dim=1, hidden_dim=1)


def set_head(model, bias, W=None):
    """Give a tabular model fixed logits/Q values through its output head."""
    store = model.params
    store["head.b"].data = np.array(bias, dtype=np.float64)
    store["head.W"].data = np.zeros_like(store["head.W"].data) if W is None else np.array(W, dtype=np.float64)
    if isinstance(model, CriticModel):
        model.target["head.b"].data = store["head.b"].data.copy()
        model.target["head.W"].data = store["head.W"].data.copy()
    return model


def tabular_policy(logits, n_states=1, cls=PolicyModel):
    m = cls(ONE_HOT, len(logits), n_tokens=n_states + 1, head_scale=0.0)
    return set_head(m, logits)


def tabular_critic(q, n_states=1):
    m = CriticModel(ONE_HOT, len(q), n_tokens=n_states + 1, head_scale=0.0)
    return set_head(m, q)


def tabular_behavior(probs, n_states=1):
    with np.errstate(divide="ignore"):
        logits = np.where(np.asarray(probs) > 0, np.log(probs), -1e3)
    return tabular_policy(logits, n_states, BehaviorModel).freeze()


def make_session(sid, items, purchases=None):
    purchases = purchases or [False] * len(items)
    return Session(sid, tuple(items), tuple(range(len(items))), tuple(purchases))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy_gru():
    """Small random GRU models over 3 items for gradient checks."""
    cfg = EncoderConfig(backbone="gru", embedding_dim=3, hidden_dim=3, window=3)
    return cfg, PolicyModel(cfg, 3, seed=1), CriticModel(cfg, 3, seed=2), BehaviorModel(cfg, 3, seed=3).freeze()


# -- acceptance reporting --------------------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report_criterion():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
