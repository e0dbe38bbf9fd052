"""Layers built from tensor ops: dense, GRU cell, dilated causal convolution."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from . import tensor as T
from .params import ParamStore
from .tensor import Tensor


def dense_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``x @ weights + bias`` for x of shape (batch, in)."""
    x, weights, bias = T.as_tensor(x), T.as_tensor(weights), T.as_tensor(bias)
    if x.ndim != 2 or weights.ndim != 2 or bias.ndim != 1:
        raise DimensionError(f"dense: expected 2-D input/weights and 1-D bias, got {x.shape}, {weights.shape}, {bias.shape}")
    if x.shape[1] != weights.shape[0] or weights.shape[1] != bias.shape[0]:
        raise DimensionError(f"dense: {x.shape} @ {weights.shape} + {bias.shape}")
    return T.matmul(x, weights) + bias


def init_dense(store: ParamStore, prefix: str, n_in: int, n_out: int, rng: np.random.Generator, scale: float | None = None) -> None:
    s = np.sqrt(1.0 / n_in) if scale is None else scale
    store.add(f"{prefix}.W", rng.normal(0.0, s, size=(n_in, n_out)) if s > 0 else np.zeros((n_in, n_out)))
    store.add(f"{prefix}.b", np.zeros(n_out))


def init_gru(store: ParamStore, prefix: str, d_in: int, d_h: int, rng: np.random.Generator) -> None:
    """Gates are packed as [update, reset, candidate] along the last axis."""
    k = 1.0 / np.sqrt(d_h)
    store.add(f"{prefix}.W", rng.uniform(-k, k, size=(d_in, 3 * d_h)))
    store.add(f"{prefix}.U", rng.uniform(-k, k, size=(d_h, 2 * d_h)))
    store.add(f"{prefix}.Un", rng.uniform(-k, k, size=(d_h, d_h)))
    store.add(f"{prefix}.b", np.zeros(3 * d_h))


def gru_step(x_proj: Tensor, hidden: Tensor, U: Tensor, Un: Tensor) -> Tensor:
    """One GRU update given the already projected input ``x @ W + b``."""
    d_h = hidden.shape[1]
    hu = T.matmul(hidden, U)
    z = T.sigmoid(x_proj[:, :d_h] + hu[:, :d_h])
    r = T.sigmoid(x_proj[:, d_h : 2 * d_h] + hu[:, d_h:])
    cand = T.tanh(x_proj[:, 2 * d_h :] + T.matmul(r * hidden, Un))
    # z -> 1 takes the candidate, z -> 0 keeps the old state
    return hidden + z * (cand - hidden)


def gru_cell(x: Tensor, hidden: Tensor, params: ParamStore, prefix: str = "gru") -> Tensor:
    x, hidden = T.as_tensor(x), T.as_tensor(hidden)
    W = params[f"{prefix}.W"]
    d_h = params[f"{prefix}.Un"].shape[0]
    if x.ndim != 2 or hidden.ndim != 2 or x.shape[0] != hidden.shape[0]:
        raise DimensionError(f"gru_cell: input {x.shape} vs hidden {hidden.shape}")
    if x.shape[1] != W.shape[0] or hidden.shape[1] != d_h:
        raise DimensionError(f"gru_cell: expected input width {W.shape[0]} and hidden width {d_h}")
    x_proj = T.matmul(x, W) + params[f"{prefix}.b"]
    return gru_step(x_proj, hidden, params[f"{prefix}.U"], params[f"{prefix}.Un"])


def init_causal_conv(store: ParamStore, prefix: str, c_in: int, c_out: int, rng: np.random.Generator) -> None:
    k = np.sqrt(1.0 / (2 * c_in))
    store.add(f"{prefix}.W0", rng.normal(0.0, k, size=(c_in, c_out)))
    store.add(f"{prefix}.W1", rng.normal(0.0, k, size=(c_in, c_out)))
    store.add(f"{prefix}.b", np.zeros(c_out))


def causal_conv(x: Tensor, params: ParamStore, prefix: str, dilation: int) -> Tensor:
    """Kernel-2 dilated causal convolution over (batch, length, channels).

    ``out[t] = x[t] W0 + x[t - dilation] W1 + b`` with zeros before the start.
    """
    B, L, C = x.shape
    W0, W1, b = params[f"{prefix}.W0"], params[f"{prefix}.W1"], params[f"{prefix}.b"]
    if dilation < L:
        lagged = T.concat([Tensor(np.zeros((B, dilation, C))), x[:, : L - dilation, :]], axis=1)
    else:
        lagged = Tensor(np.zeros((B, L, C)))
    flat = T.matmul(x.reshape(B * L, C), W0) + T.matmul(lagged.reshape(B * L, C), W1) + b
    return flat.reshape(B, L, W0.shape[1])
