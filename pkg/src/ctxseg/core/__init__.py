"""Numeric core: tensors, reverse-mode autodiff, seeded streams, gradient checks."""

from . import ops
from .gradcheck import directional_check, grad_check
from .rng import STREAMS, Rng, stream
from .tensor import (
    DimensionError,
    Graph,
    StateError,
    Tensor,
    active_graph,
    get_dtype,
    ones,
    precision,
    tensor,
    zeros,
)

__all__ = [
    "ops",
    "grad_check",
    "directional_check",
    "Rng",
    "STREAMS",
    "stream",
    "DimensionError",
    "Graph",
    "StateError",
    "Tensor",
    "active_graph",
    "get_dtype",
    "ones",
    "precision",
    "tensor",
    "zeros",
]
