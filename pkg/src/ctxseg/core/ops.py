"""Differentiable operations on :class:`~ctxseg.core.tensor.Tensor`.

Each op computes its forward result with numpy and, when recording, saves
only what its backward closure needs.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, StateError, Tensor, get_dtype, maybe_record

KERNEL = 4
# 4x4 kernels need 3 pixels of padding per axis for "same" output.
PAD_BEFORE = 1
PAD_AFTER = 2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
# cap on im2col buffer elements; larger convolutions are processed in row bands
IM2COL_BUDGET = 1 << 26


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return maybe_record("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return maybe_record("sub", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    av, bv = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return maybe_record("mul", (a, b), out, backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _t(x)
    out = Tensor(np.sum(x.data, dtype=x.dtype).reshape(()))
    shape = x.shape
    return maybe_record("sum", (x,), out, lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    x = _t(x)
    out = Tensor(np.mean(x.data).reshape(()))
    shape, n = x.shape, x.size
    return maybe_record("mean", (x,), out, lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def relu(x: Tensor) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    out = Tensor(np.maximum(x.data, 0))
    return maybe_record("relu", (x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = _t(x)
    v = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype)
    out = Tensor(s)
    return maybe_record("sigmoid", (x,), out, lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    x = _t(x)
    t = np.tanh(x.data)
    out = Tensor(t)
    return maybe_record("tanh", (x,), out, lambda g: (g * (1 - t * t),))


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _t(x)
    original = x.shape
    out = Tensor(x.data.reshape(shape))
    return maybe_record("reshape", (x,), out, lambda g: (g.reshape(original),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_t(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty list")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(x.shape, ref)) if i != ax
        ):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in xs]} disagree off-axis"
            )
    out = Tensor(np.concatenate([x.data for x in xs], axis=ax))
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))
        )

    return maybe_record("concat", tuple(xs), out, backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Inverse of :func:`concat`; each piece is its own graph node."""
    x = _t(x)
    ax = axis % x.ndim
    if int(np.sum(sizes)) != x.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover extent {x.shape[ax]}")
    pieces = []
    start = 0
    for n in sizes:
        pieces.append(slice_axis(x, start, start + n, axis=ax))
        start += n
    return pieces


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    x = _t(x)
    ax = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    out = Tensor(x.data[index])
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return maybe_record("slice", (x,), out, backward)


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.data, b.data
    out = Tensor(av @ bv)

    def backward(g):
        return g @ bv.T, av.T @ g

    return maybe_record("matmul", (a, b), out, backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` as one node (bias broadcast over rows)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear shapes {x.shape} and {w.shape} are incompatible")
    xv, wv = x.data, w.data
    y = xv @ wv
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"bias shape {b.shape} does not match {w.shape[1]} outputs")
        y += b.data
    out = Tensor(y)

    def backward(g):
        gb = g.sum(axis=0) if b is not None else None
        return g @ wv.T, xv.T @ g, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return maybe_record("linear", inputs, out, backward)


# -------------------------------------------------------------- convolution


def _row_band(n: int, c: int, h: int, w: int) -> int:
    per_row = max(1, n * w * c * KERNEL * KERNEL)
    return int(max(1, min(h, IM2COL_BUDGET // per_row)))


def _im2col(xpad: np.ndarray, r0: int, r1: int, width: int) -> np.ndarray:
    """Columns for output rows [r0, r1) as a (C*16, N*(r1-r0)*W) matrix.

    Row index is (c, i, j) with the kernel offset innermost, matching
    ``w.reshape(K, C*16)``; column index is (n, row, col).
    """
    band = xpad[:, :, r0 : r1 + KERNEL - 1, : width + KERNEL - 1]
    win = sliding_window_view(band, (KERNEL, KERNEL), axis=(2, 3))  # N,C,h,W,4,4
    n, c = band.shape[:2]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * KERNEL * KERNEL, n * (r1 - r0) * width)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """4x4 "same" convolution, stride 1, no bias, via im2col + matmul.

    Padding is 1 before and 2 after on each spatial axis, so a delta kernel
    with its 1 at (1, 1) reproduces the input. Inputs whose column matrix
    exceeds ``IM2COL_BUDGET`` elements are processed in bands of output rows.
    """
    x, w = _t(x), _t(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and KCkk weights, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if (kh, kw) != (KERNEL, KERNEL):
        raise DimensionError(f"conv2d kernel must be 4x4, got {kh}x{kw}")
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    xpad = np.pad(x.data, ((0, 0), (0, 0), (PAD_BEFORE, PAD_AFTER), (PAD_BEFORE, PAD_AFTER)))
    wmat = w.data.reshape(k, c * KERNEL * KERNEL)
    band = _row_band(n, c, h, wd)
    single = band >= h
    y = np.empty((n, k, h, wd), dtype=x.dtype)
    cached = None
    for r0 in range(0, h, band):
        r1 = min(h, r0 + band)
        cols = _im2col(xpad, r0, r1, wd)
        y[:, :, r0:r1, :] = (wmat @ cols).reshape(k, n, r1 - r0, wd).transpose(1, 0, 2, 3)
        if single:
            cached = cols
    out = Tensor(y)

    def backward(g):
        dw = np.zeros_like(wmat)
        dxpad = np.zeros_like(xpad) if x.requires_grad else None
        for r0 in range(0, h, band):
            r1 = min(h, r0 + band)
            rows = r1 - r0
            gmat = g[:, :, r0:r1, :].transpose(1, 0, 2, 3).reshape(k, -1)
            cols = cached if cached is not None else _im2col(xpad, r0, r1, wd)
            dw += gmat @ cols.T
            if dxpad is not None:
                dcols = (wmat.T @ gmat).reshape(c, KERNEL, KERNEL, n, rows, wd)
                for i in range(KERNEL):
                    for j in range(KERNEL):
                        dxpad[:, :, r0 + i : r1 + i, j : j + wd] += dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = None
        if dxpad is not None:
            dx = dxpad[:, :, PAD_BEFORE : PAD_BEFORE + h, PAD_BEFORE : PAD_BEFORE + wd]
        return dx, dw.reshape(w.shape)

    return maybe_record("conv2d", (x, w), out, backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2. Ties route the gradient to the first cell in row-major order."""
    x = _t(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    v = x.data
    cells = (v[:, :, 0::2, 0::2], v[:, :, 0::2, 1::2], v[:, :, 1::2, 0::2], v[:, :, 1::2, 1::2])
    m = np.maximum(np.maximum(cells[0], cells[1]), np.maximum(cells[2], cells[3]))
    out = Tensor(m)

    def backward(g):
        gx = np.zeros(v.shape, dtype=g.dtype)
        taken = np.zeros(m.shape, dtype=bool)
        for (di, dj), cell in zip(((0, 0), (0, 1), (1, 0), (1, 1)), cells):
            sel = (cell == m) & ~taken
            taken |= sel
            gx[:, :, di::2, dj::2] = g * sel
        return (gx,)

    return maybe_record("maxpool2d", (x,), out, backward)


class RunningStats:
    """Batch-norm running mean/variance buffers (not trainable)."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)
        self.populated = False

    def update(self, mean: np.ndarray, var_unbiased: np.ndarray) -> None:
        self.mean = (1 - BN_MOMENTUM) * self.mean + BN_MOMENTUM * mean
        self.var = (1 - BN_MOMENTUM) * self.var + BN_MOMENTUM * var_unbiased
        self.populated = True


def batchnorm2d(
    x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats | None, train: bool
) -> Tensor:
    """Per-channel normalisation over N, H, W.

    Train mode normalises with the biased batch variance and folds the
    unbiased variance into ``stats``; eval mode reads ``stats``.
    """
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d shapes x={x.shape} gamma={gamma.shape} beta={beta.shape}")
    n, c, h, w = x.shape
    m = n * h * w
    xv = x.data
    gv = gamma.data.reshape(1, c, 1, 1)
    if train:
        mu = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        if stats is not None:
            stats.update(mu.astype(np.float64), var.astype(np.float64) * (m / max(m - 1, 1)))
    else:
        if stats is None or not stats.populated:
            raise StateError("batchnorm2d eval mode needs populated running statistics")
        mu = stats.mean.astype(xv.dtype)
        var = stats.var.astype(xv.dtype)
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(xv.dtype).reshape(1, c, 1, 1)
    xhat = (xv - mu.reshape(1, c, 1, 1)) * inv
    out = Tensor(xhat * gv + beta.data.reshape(1, c, 1, 1))

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        if train:
            dx = (gv * inv / m) * (
                m * g - dbeta.reshape(1, c, 1, 1) - xhat * dgamma.reshape(1, c, 1, 1)
            )
        else:
            dx = g * gv * inv
        return dx, dgamma, dbeta

    return maybe_record("batchnorm2d", (x, gamma, beta), out, backward)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    x = _t(x)
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng stream")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    out = Tensor(x.data * mask)
    return maybe_record("dropout", (x,), out, lambda g: (g * mask,))


# --------------------------------------------------------------------- loss


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    logits = _t(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, labels])
    out = Tensor(np.asarray(loss).reshape(()))
    probs = np.exp(z - logsum[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / n),)

    return maybe_record("softmax_cross_entropy", (logits,), out, backward)


def cast_input(arr: np.ndarray) -> Tensor:
    """Wrap a numpy image batch at the current precision without gradients."""
    return Tensor(np.asarray(arr, dtype=get_dtype()))
