"""Minimal float64 autodiff engine, layers, optimizers and checkpoints."""

from . import tensor as ops
from .layers import causal_conv, dense_forward, gru_cell, gru_step, init_causal_conv, init_dense, init_gru
from .params import (
    ParamStore,
    adam_step,
    fill_missing_grads,
    grad_check,
    load_checkpoint,
    read_params,
    save_checkpoint,
    sgd_step,
    write_params,
)
from .tensor import Tensor, no_grad

__all__ = [
    "ParamStore",
    "Tensor",
    "adam_step",
    "causal_conv",
    "dense_forward",
    "fill_missing_grads",
    "grad_check",
    "gru_cell",
    "gru_step",
    "init_causal_conv",
    "init_dense",
    "init_gru",
    "load_checkpoint",
    "no_grad",
    "ops",
    "read_params",
    "save_checkpoint",
    "sgd_step",
    "write_params",
]
