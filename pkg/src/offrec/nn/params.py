"""Named parameter collections, optimizers and the binary checkpoint format."""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Callable, Iterator

import numpy as np

from ..errors import DataError, NumericError, UsageError
from .tensor import Tensor

MAGIC = b"ORECv1"
_LITTLE = 0
_BIG = 1


class ParamStore:
    """Ordered name -> Tensor map plus optimizer moment buffers.

    Names are unique; ``add`` refuses duplicates. The Adam state (``m``, ``v``)
    is created lazily with the same shapes as the parameters.
    """

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        """Deep copy of parameter values; optimizer state is not carried over."""
        out = ParamStore()
        for name, t in self.params.items():
            out.add(name, t.data.copy())
        return out

    def assign(self, other: "ParamStore") -> None:
        for name, t in self.params.items():
            t.data = other[name].data.copy()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in state:
                raise DataError(f"checkpoint lacks parameter {name!r}")
            if state[name].shape != t.data.shape:
                raise DataError(f"shape mismatch for {name!r}: {state[name].shape} vs {t.data.shape}")
            t.data = np.array(state[name], dtype=np.float64)


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_adam: float = 1e-8,
) -> ParamStore:
    """Bias-corrected Adam update in place; clears grads afterwards."""
    missing = [n for n, t in store.items() if t.grad is None]
    if missing:
        raise UsageError(f"parameters without grad: {missing[:5]}")
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for name, t in store.items():
        g = t.grad
        m = store.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            store.v[name] = np.zeros_like(t.data)
        v = store.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store.m[name] = m
        store.v[name] = v
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps_adam)
        t.grad = None
    return store


def sgd_step(store: ParamStore, lr: float) -> ParamStore:
    missing = [n for n, t in store.items() if t.grad is None]
    if missing:
        raise UsageError(f"parameters without grad: {missing[:5]}")
    store.step += 1
    for t in store.params.values():
        t.data = t.data - lr * t.grad
        t.grad = None
    return store


def fill_missing_grads(store: ParamStore) -> None:
    """Zero grads for parameters that did not take part in the last backward."""
    for t in store.params.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def grad_check(loss_fn: Callable[[ParamStore], Tensor], store: ParamStore, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` must be deterministic: any sampling noise has to be fixed by
    the caller. The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    store.zero_grad()
    loss = loss_fn(store)
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss in grad_check")
    loss.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in store.items()}
    store.zero_grad()
    worst = 0.0
    for name, t in store.items():
        flat = t.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn(store).data)
            flat[i] = orig - h
            down = float(loss_fn(store).data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            num = (up - down) / (2.0 * h)
            worst = max(worst, abs(ana[i] - num) / max(1.0, abs(num)))
    return worst


# -- checkpoint format ----------------------------------------------------------
# header:  b"ORECv1" | u8 endianness flag (0 = little) | u32 record count
# record:  u32 name length | name utf-8 | u32 ndim | u64 * ndim shape | f64 * prod(shape)
# all integers and floats little-endian


def write_params(fh: BinaryIO, state: dict[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<B", _LITTLE))
    fh.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_params(fh: BinaryIO) -> "OrderedDict[str, np.ndarray]":
    if fh.read(len(MAGIC)) != MAGIC:
        raise DataError("not an ORECv1 checkpoint")
    (flag,) = struct.unpack("<B", fh.read(1))
    if flag != _LITTLE:
        raise DataError(f"unsupported endianness flag {flag}")
    (count,) = struct.unpack("<I", fh.read(4))
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<I", fh.read(4))
        name = fh.read(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        buf = fh.read(8 * size)
        if len(buf) != 8 * size:
            raise DataError(f"truncated record {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return out


def save_checkpoint(path: str | Path, stores: dict[str, ParamStore]) -> None:
    """Write several stores into one file, names prefixed ``<store>/<param>``."""
    state = {}
    for prefix, store in stores.items():
        for name, t in store.items():
            state[f"{prefix}/{name}"] = t.data
    buf = io.BytesIO()
    write_params(buf, state)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        flat = read_params(fh)
    out: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in flat.items():
        prefix, _, name = key.partition("/")
        out.setdefault(prefix, OrderedDict())[name] = arr
    return out
