"""Stateful layers with a named parameter registry."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .core import ops
from .core.ops import RunningStats
from .core.tensor import DimensionError, Tensor, get_dtype

# Gate blocks of the packed LSTM matrices, in column order.
GATE_ORDER = ("i", "f", "g", "o")


class ParamRegistry:
    """Ordered ``name -> Tensor`` table; a tensor object is registered at most once."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._kinds: dict[str, str] = {}
        self._ids: set[int] = set()
        self.stats: dict[str, RunningStats] = {}

    def register(self, name: str, t: Tensor, kind: str) -> Tensor:
        if id(t) in self._ids:
            return t
        if name in self._params:
            raise KeyError(f"parameter name {name!r} already registered")
        t.name = name
        t.requires_grad = True
        self._params[name] = t
        self._kinds[name] = kind
        self._ids.add(id(t))
        return t

    def register_stats(self, name: str, stats: RunningStats) -> RunningStats:
        if name in self.stats:
            raise KeyError(f"statistics name {name!r} already registered")
        self.stats[name] = stats
        return stats

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def kind(self, name: str) -> str:
        return self._kinds[name]

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None


def _param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=True)


class Dense:
    def __init__(self, registry: ParamRegistry, prefix: str, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out
        self.weight = registry.register(f"{prefix}.weight", _param((n_in, n_out)), "dense")
        self.bias = registry.register(f"{prefix}.bias", _param((n_out,)), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    @property
    def n_params(self) -> int:
        return self.n_in * self.n_out + self.n_out


class ConvBlock:
    """conv2d -> batchnorm2d -> relu -> maxpool2d; halves each spatial extent."""

    def __init__(self, registry: ParamRegistry, prefix: str, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out
        self.weight = registry.register(f"{prefix}.weight", _param((n_out, n_in, 4, 4)), "conv")
        self.gamma = registry.register(f"{prefix}.bn.gamma", _param((n_out,)), "gamma")
        self.beta = registry.register(f"{prefix}.bn.beta", _param((n_out,)), "beta")
        self.stats = registry.register_stats(f"{prefix}.bn", RunningStats(n_out))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        y = ops.conv2d(x, self.weight)
        y = ops.batchnorm2d(y, self.gamma, self.beta, self.stats, train)
        return ops.maxpool2d(ops.relu(y))

    @property
    def n_params(self) -> int:
        return self.n_in * self.n_out * 16 + 2 * self.n_out


class LstmCell:
    """Four-gate LSTM with one bias vector; gate blocks packed as i, f, g, o."""

    def __init__(self, registry: ParamRegistry, prefix: str, n_in: int, hidden: int):
        self.n_in, self.hidden = n_in, hidden
        self.w_x = registry.register(f"{prefix}.w_x", _param((n_in, 4 * hidden)), "lstm_w")
        self.w_h = registry.register(f"{prefix}.w_h", _param((hidden, 4 * hidden)), "lstm_w")
        self.b = registry.register(f"{prefix}.b", _param((4 * hidden,)), "lstm_b")

    @property
    def n_params(self) -> int:
        return 4 * (self.n_in * self.hidden + self.hidden * self.hidden + self.hidden)

    def zero_state(self, n: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((n, self.hidden), dtype=get_dtype())
        return Tensor(z), Tensor(z.copy())

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return lstm_step(self, x, h, c)


def lstm_step(cell: LstmCell, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    n = x.shape[0]
    if x.shape != (n, cell.n_in):
        raise DimensionError(f"lstm input {x.shape} does not match cell input size {cell.n_in}")
    if h.shape != (n, cell.hidden) or c.shape != (n, cell.hidden):
        raise DimensionError(
            f"lstm state h={h.shape} c={c.shape} does not match hidden size {cell.hidden}"
        )
    z = ops.add(ops.linear(x, cell.w_x, cell.b), ops.matmul(h, cell.w_h))
    zi, zf, zg, zo = ops.split(z, [cell.hidden] * 4, axis=1)
    i, f, g, o = ops.sigmoid(zi), ops.sigmoid(zf), ops.tanh(zg), ops.sigmoid(zo)
    c_new = ops.add(ops.mul(f, c), ops.mul(i, g))
    h_new = ops.mul(o, ops.tanh(c_new))
    return h_new, c_new


def count_params(registry: ParamRegistry) -> int:
    """Trainable element count; running statistics are buffers and excluded."""
    return int(sum(t.size for _, t in registry))


def init_params(registry: ParamRegistry, rng: np.random.Generator, scheme: str = "he_uniform") -> None:
    """Deterministic initialisation, drawn in registry order from ``rng``.

    Conv and dense weights: U(-a, a) with a = sqrt(6 / fan_in), i.e. std
    sqrt(2 / fan_in). LSTM matrices: U(+-1/sqrt(hidden)). Biases and beta 0,
    gamma 1, LSTM forget-gate bias 1.
    """
    if scheme != "he_uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    for name, t in registry:
        kind = registry.kind(name)
        dtype = t.data.dtype
        if kind == "conv":
            fan_in = t.shape[1] * t.shape[2] * t.shape[3]
            a = math.sqrt(6.0 / fan_in)
            t.data[...] = rng.uniform(-a, a, size=t.shape).astype(dtype)
        elif kind == "dense":
            a = math.sqrt(6.0 / t.shape[0])
            t.data[...] = rng.uniform(-a, a, size=t.shape).astype(dtype)
        elif kind == "lstm_w":
            a = 1.0 / math.sqrt(t.shape[1] // 4)
            t.data[...] = rng.uniform(-a, a, size=t.shape).astype(dtype)
        elif kind == "lstm_b":
            hidden = t.shape[0] // 4
            t.data[...] = 0
            t.data[hidden : 2 * hidden] = 1
        elif kind == "gamma":
            t.data[...] = 1
        elif kind in ("bias", "beta"):
            t.data[...] = 0
        else:
            raise ValueError(f"parameter {name!r} has unknown kind {kind!r}")
    for stats in registry.stats.values():
        stats.mean[...] = 0
        stats.var[...] = 1
        stats.populated = False
