"""Tensor value type and the append-only computation graph.

Every op in :mod:`ctxseg.core.ops` returns a fresh :class:`Tensor`. When a
:class:`Graph` is active (``with Graph() as g:``) and at least one input
requires a gradient, the op appends a node holding its backward closure.
``g.backward(loss)`` then walks the nodes once, in reverse insertion order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "DimensionError",
    "StateError",
    "active_graph",
    "get_dtype",
    "precision",
    "tensor",
    "zeros",
    "ones",
]


class DimensionError(ValueError):
    """Operand extents are incompatible with the requested op."""


class StateError(RuntimeError):
    """An op was invoked before the state it depends on exists."""


_DTYPE = np.dtype(np.float32)


def get_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default float type (``float64`` for gradient checks)."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype)
    if _DTYPE not in (np.float32, np.float64):
        _DTYPE = previous
        raise ValueError(f"unsupported precision {dtype!r}")
    try:
        yield
    finally:
        _DTYPE = previous


class Tensor:
    """Dense row-major array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient {g.shape} does not match tensor {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; implementations live in ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _wrap(other))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_wrap(other), self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_GRAPH_STACK: list["Graph"] = []


def active_graph() -> "Graph | None":
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Graph:
    """Tape of recorded ops. Node ids are insertion indices, so inputs always precede outputs."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._done = False

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _GRAPH_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        node = _Node(op, tuple(inputs), output, backward)
        output.node_id = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(node)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from ``loss``; leaf tensors accumulate into ``.grad``."""
        if self._done:
            raise StateError("backward already ran on this graph")
        if grad is None:
            if loss.size != 1:
                raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.accumulate(np.asarray(grad, dtype=loss.dtype))
        nodes, self.nodes = self.nodes, []
        while nodes:
            # popping releases each node's saved buffers once it has run
            node = nodes.pop()
            out = node.output
            g = out.grad
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp.accumulate(gi)
            # intermediate buffers are no longer needed once propagated
            if out is not loss:
                out.grad = None
        self._done = True


def maybe_record(op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> Tensor:
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        graph.record(op, inputs, output, backward)
    return output
