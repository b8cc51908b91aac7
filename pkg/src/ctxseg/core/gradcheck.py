"""Central finite-difference gradient checking (run under ``precision("float64")``)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Tensor, get_dtype

Builder = Callable[[], Tensor]


def _rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum.reduce([np.ones_like(a), np.abs(a), np.abs(n)])


def _evaluate(f: Builder) -> float:
    out = f()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar output, got shape {out.shape}")
    return float(out.data.reshape(()))


def analytic_grads(f: Builder, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Graph() as g:
        out = f()
        if out.size != 1:
            raise ValueError(f"grad_check needs a scalar output, got shape {out.shape}")
        g.backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def grad_check(
    f: Builder,
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` rebuilds the scalar output from the current contents of
    ``inputs`` on every call. With ``coords`` set, that many coordinates per
    input are sampled instead of sweeping all of them.
    """
    if get_dtype() != np.float64:
        raise RuntimeError("grad_check must run under precision('float64')")
    grads = analytic_grads(f, inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(inputs, grads):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        if coords is None or coords >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = _evaluate(f)
            flat[i] = orig - h
            fm = _evaluate(f)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, float(_rel_err(np.float64(gflat[i]), np.float64(num))))
    return worst


def directional_check(
    f: Builder, inputs: Sequence[Tensor], h: float = 1e-4, directions: int = 1, seed: int = 0
) -> float:
    """Compare <grad, v> with (f(x+hv) - f(x-hv)) / 2h along random unit directions ``v``.

    Costs two forward passes per direction regardless of the number of
    coordinates, which is what makes whole-architecture checks tractable.
    """
    if get_dtype() != np.float64:
        raise RuntimeError("directional_check must run under precision('float64')")
    grads = analytic_grads(f, inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(t.shape) for t in inputs]
        norm = np.sqrt(np.sum([np.sum(v * v) for v in vs]))
        vs = [v / norm for v in vs]
        analytic = float(np.sum([np.sum(g * v) for g, v in zip(grads, vs)]))
        originals = [t.data.copy() for t in inputs]
        for t, v, o in zip(inputs, vs, originals):
            t.data[...] = o + h * v
        fp = _evaluate(f)
        for t, v, o in zip(inputs, vs, originals):
            t.data[...] = o - h * v
        fm = _evaluate(f)
        for t, o in zip(inputs, originals):
            t.data[...] = o
        num = (fp - fm) / (2 * h)
        worst = max(worst, float(_rel_err(np.float64(analytic), np.float64(num))))
    return worst
