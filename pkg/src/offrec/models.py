"""
State encoders, the softmax policy, the critic with its target copy, the
estimated logging policy, Gumbel-Softmax relaxation and top-k generation.

Encoders are stateless: they read their weights from a ``ParamStore`` passed
at call time, which is how the critic evaluates its target copy with the same
code path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError
from .nn import ParamStore, Tensor, no_grad
from .nn import ops as T
from .nn.layers import causal_conv, gru_step, init_causal_conv, init_dense, init_gru

BACKBONES = ("gru", "meanpool", "cnn")


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "gru"
    embedding_dim: int = 64
    hidden_dim: int = 64
    window: int = 10
    one_hot: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if min(self.embedding_dim, self.hidden_dim, self.window) < 1:
            raise ConfigError("encoder dimensions and window must be >= 1")

    def scaled(self, factor: int) -> "EncoderConfig":
        return EncoderConfig(self.backbone, self.embedding_dim, self.hidden_dim * factor, self.window, self.one_hot)


class Encoder:
    """Maps a (batch, window) array of token ids to (batch, out_dim) features.

    The padding token (``n_tokens - 1``) contributes nothing: adding more
    padding on the left never changes the output.
    """

    def __init__(self, cfg: EncoderConfig, n_tokens: int, prefix: str = "enc"):
        self.cfg = cfg
        self.n_tokens = n_tokens
        self.pad = n_tokens - 1
        self.prefix = prefix
        self.emb_dim = n_tokens - 1 if cfg.one_hot else cfg.embedding_dim
        if cfg.backbone == "meanpool":
            self.out_dim = self.emb_dim
        else:
            self.out_dim = cfg.hidden_dim
        if cfg.one_hot:
            eye = np.eye(n_tokens, n_tokens - 1)
            self._onehot = eye  # pad row is all zeros

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        p = self.prefix
        if not self.cfg.one_hot:
            table = rng.normal(0.0, 0.1, size=(self.n_tokens, self.emb_dim))
            table[self.pad] = 0.0
            store.add(f"{p}.emb", table)
        if self.cfg.backbone == "gru":
            init_gru(store, f"{p}.gru", self.emb_dim, self.cfg.hidden_dim, rng)
        elif self.cfg.backbone == "cnn":
            init_causal_conv(store, f"{p}.conv1", self.emb_dim, self.cfg.hidden_dim, rng)
            init_causal_conv(store, f"{p}.conv2", self.cfg.hidden_dim, self.cfg.hidden_dim, rng)

    def _embed(self, store: ParamStore, tokens: np.ndarray) -> Tensor:
        if self.cfg.one_hot:
            return Tensor(self._onehot[tokens])
        return T.take_rows(store[f"{self.prefix}.emb"], tokens)

    def forward(self, store: ParamStore, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        mask = tokens != self.pad
        backbone = self.cfg.backbone
        if backbone == "meanpool":
            return self._meanpool(store, tokens, mask)
        if backbone == "gru":
            return self._gru(store, tokens, mask)
        return self._cnn(store, tokens, mask)

    def _meanpool(self, store, tokens, mask) -> Tensor:
        B, L = tokens.shape
        emb = self._embed(store, tokens) * mask[:, :, None]
        count = np.maximum(mask.sum(axis=1, keepdims=True), 1).astype(np.float64)
        return emb.sum(axis=1) / count

    def _gru(self, store, tokens, mask) -> Tensor:
        B, L = tokens.shape
        p = f"{self.prefix}.gru"
        d_h = self.cfg.hidden_dim
        emb = self._embed(store, tokens)
        x_proj = (T.matmul(emb.reshape(B * L, self.emb_dim), store[f"{p}.W"]) + store[f"{p}.b"]).reshape(B, L, 3 * d_h)
        h = Tensor(np.zeros((B, d_h)))
        U, Un = store[f"{p}.U"], store[f"{p}.Un"]
        for t in range(L):
            col = mask[:, t]
            if not col.any():
                continue
            h_new = gru_step(x_proj[:, t, :], h, U, Un)
            if col.all():
                h = h_new
            else:
                m = col[:, None].astype(np.float64)
                h = h + m * (h_new - h)
        return h

    def _cnn(self, store, tokens, mask) -> Tensor:
        m = mask[:, :, None].astype(np.float64)
        x = self._embed(store, tokens) * m
        x = T.relu(causal_conv(x, store, f"{self.prefix}.conv1", dilation=1)) * m
        x = T.relu(causal_conv(x, store, f"{self.prefix}.conv2", dilation=2)) * m
        count = np.maximum(mask.sum(axis=1, keepdims=True), 1).astype(np.float64)
        return x.sum(axis=1) / count


class ScoringNet:
    """Encoder followed by a linear head of width ``n_actions``."""

    def __init__(self, cfg: EncoderConfig, n_actions: int, n_tokens: int):
        self.cfg = cfg
        self.n_actions = n_actions
        self.n_tokens = n_tokens
        self.encoder = Encoder(cfg, n_tokens)

    def init_params(self, rng: np.random.Generator, head_scale: float | None = None) -> ParamStore:
        store = ParamStore()
        self.encoder.init_params(store, rng)
        init_dense(store, "head", self.encoder.out_dim, self.n_actions, rng, scale=head_scale)
        return store

    def forward(self, store: ParamStore, states: np.ndarray) -> Tensor:
        feats = self.encoder.forward(store, states)
        return T.matmul(feats, store["head.W"]) + store["head.b"]


class PolicyModel:
    """Softmax policy ``pi(a|s) = softmax(f(s))`` over real items."""

    def __init__(self, cfg: EncoderConfig, n_actions: int, n_tokens: int | None = None, *, rng=None, seed: int = 0, head_scale: float | None = None):
        n_tokens = n_actions + 1 if n_tokens is None else n_tokens
        self.net = ScoringNet(cfg, n_actions, n_tokens)
        rng = np.random.default_rng(seed) if rng is None else rng
        self.params = self.net.init_params(rng, head_scale)
        self.frozen = False

    @property
    def cfg(self) -> EncoderConfig:
        return self.net.cfg

    @property
    def n_actions(self) -> int:
        return self.net.n_actions

    @property
    def n_tokens(self) -> int:
        return self.net.n_tokens

    def logits(self, states: np.ndarray) -> Tensor:
        return self.net.forward(self.params, states)

    def log_probs(self, states: np.ndarray) -> Tensor:
        return policy_logprobs(self, states)

    def probs(self, states: np.ndarray) -> np.ndarray:
        with no_grad():
            return np.exp(policy_logprobs(self, states).data)


class BehaviorModel(PolicyModel):
    """Estimated logging policy; read-only after :meth:`freeze`."""

    def freeze(self) -> "BehaviorModel":
        self.frozen = True
        for t in self.params.params.values():
            t.requires_grad = False
            t.data.setflags(write=False)
        return self

    def log_probs_np(self, states: np.ndarray, floor: float = 0.0) -> np.ndarray:
        with no_grad():
            lp = policy_logprobs(self, states).data
        return np.maximum(lp, np.log(floor)) if floor > 0 else lp


class CriticModel:
    """Q-network with a target copy updated by :func:`sync_target`."""

    def __init__(self, cfg: EncoderConfig, n_actions: int, n_tokens: int | None = None, *, rng=None, seed: int = 0, head_scale: float | None = None):
        n_tokens = n_actions + 1 if n_tokens is None else n_tokens
        self.net = ScoringNet(cfg, n_actions, n_tokens)
        rng = np.random.default_rng(seed) if rng is None else rng
        self.params = self.net.init_params(rng, head_scale)
        self.target = self.params.copy()
        for t in self.target.params.values():
            t.requires_grad = False
        self.sync_calls = 0

    @property
    def cfg(self) -> EncoderConfig:
        return self.net.cfg

    @property
    def n_actions(self) -> int:
        return self.net.n_actions

    @property
    def n_tokens(self) -> int:
        return self.net.n_tokens


def policy_logprobs(model: PolicyModel, states: np.ndarray) -> Tensor:
    """Log-sum-exp stable ``log pi(.|s)`` of shape (batch, n_actions)."""
    return T.log_softmax(model.logits(states), axis=-1)


@dataclass
class GumbelSample:
    noise: np.ndarray
    temperature: float
    y: Tensor


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    # u in [0, 1): guard both ends of the double log
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(log_probs, temperature: float, rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> GumbelSample:
    """Relaxed one-hot sample ``softmax((log p + g) / temperature)``.

    Differentiable in ``log_probs`` for fixed ``noise``.
    """
    if not temperature > 0:
        raise ConfigError(f"Gumbel temperature must be > 0, got {temperature}")
    log_probs = T.as_tensor(log_probs)
    if noise is None:
        if rng is None:
            raise UsageError("gumbel_softmax_sample needs rng or noise")
        noise = sample_gumbel(rng, log_probs.shape)
    y = T.softmax((log_probs + noise) * (1.0 / temperature), axis=-1)
    return GumbelSample(noise=noise, temperature=temperature, y=y)


def q_values(model: CriticModel, states: np.ndarray, use_target: bool = False) -> Tensor:
    store = model.target if use_target else model.params
    return model.net.forward(store, states)


def sync_target(model: CriticModel, mode: str = "hard", period: int = 1, tau: float = 1.0) -> CriticModel:
    """Hard copy every ``period`` calls, or Polyak averaging on every call."""
    if mode == "hard":
        if period < 1:
            raise ConfigError("hard target sync needs period >= 1")
        model.sync_calls += 1
        if model.sync_calls % period == 0:
            for name, t in model.params.items():
                model.target[name].data = t.data.copy()
    elif mode == "polyak":
        if not 0.0 < tau <= 1.0:
            raise ConfigError("polyak tau must be in (0, 1]")
        model.sync_calls += 1
        for name, t in model.params.items():
            tgt = model.target[name]
            tgt.data = t.data.copy() if tau == 1.0 else tau * t.data + (1.0 - tau) * tgt.data
    else:
        raise ConfigError(f"unknown target sync mode {mode!r}")
    return model


def rank_scores(scores: np.ndarray, k: int | None = None) -> np.ndarray:
    """Item ids sorted by score descending, ties by ascending id."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order if k is None else order[..., :k]


def top_k(model: PolicyModel, states: np.ndarray, k: int) -> np.ndarray:
    if not 1 <= k <= model.n_actions:
        raise UsageError(f"k must be in [1, {model.n_actions}], got {k}")
    with no_grad():
        logits = model.logits(states).data
    return rank_scores(logits, k)


# -- checkpoints ---------------------------------------------------------------------


def save_model(path: str | Path, model, kind: str, extra: dict | None = None) -> None:
    from .nn import save_checkpoint

    path = Path(path)
    stores = {"params": model.params}
    if isinstance(model, CriticModel):
        stores["target"] = model.target
    save_checkpoint(path, stores)
    meta = {
        "kind": kind,
        "model": type(model).__name__,
        "encoder": asdict(model.cfg),
        "n_actions": model.n_actions,
        "n_tokens": model.n_tokens,
        "window": model.cfg.window,
    }
    meta.update(extra or {})
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_model(path: str | Path):
    from .nn import load_checkpoint

    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    cfg = EncoderConfig(**meta["encoder"])
    cls = {"PolicyModel": PolicyModel, "BehaviorModel": BehaviorModel, "CriticModel": CriticModel}[meta["model"]]
    model = cls(cfg, meta["n_actions"], meta["n_tokens"])
    stores = load_checkpoint(path)
    model.params.load_state_dict(stores["params"])
    if isinstance(model, CriticModel) and "target" in stores:
        model.target.load_state_dict(stores["target"])
    return model, meta
