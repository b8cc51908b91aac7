"""Self-check suites: gradients, parameter counts, and brute-force oracles.

Each suite returns a list of :class:`Check` records; nothing here raises on
a failed comparison, so a caller can print a complete pass/fail ledger.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ops
from .core.gradcheck import directional_check, grad_check
from .core.ops import KERNEL, PAD_AFTER, PAD_BEFORE, RunningStats
from .core.tensor import Tensor, precision
from .nn import LstmCell, ParamRegistry, lstm_step
from .zoo import HIRES, arch_spec, build

GRAD_TOL = 1e-4
# small enough that a step rarely moves one of the 512x512 activations across a relu or max-pool kink
ARCH_STEP = 1e-7
ORACLE_TOL = 1e-6

EXPECTED_PARAMS = {
    "A": 7_217_028,
    "B": 7_217_028,
    "C": 7_217_028,
    "D": 7_217_028,
    "E": 7_226_244,
    "F": 8_003_460,
    "G": 10_102_660,
    "H": 20_852_612,
    "I": 28_860_420,
    "J": 30_959_620,
    "G_BIDIR": 13_250_436,
}
# published rounded counts, in millions
PUBLISHED_PARAMS_M = {"A": 7.2, "B": 7.2, "C": 7.2, "D": 7.2, "E": 7.3, "F": 8.0, "G": 10.1, "H": 19.8, "I": 28.9, "J": 31.0}


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    limit: float
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.value:.3g} (limit {self.limit:.3g}, {self.seconds:.1f}s)"


def _timed(name: str, limit: float, fn: Callable[[], float], below: bool = True) -> Check:
    t0 = time.perf_counter()
    value = float(fn())
    ok = value < limit if below else value >= limit
    return Check(name, bool(ok and math.isfinite(value)), value, limit, time.perf_counter() - t0)


# ------------------------------------------------------------------- params


def params_suite() -> list[Check]:
    out = []
    for arch, expected in EXPECTED_PARAMS.items():
        t0 = time.perf_counter()
        n = build(arch_spec(arch), seed=None).n_params
        out.append(Check(f"params {arch} == {expected:,}", n == expected, n, expected, time.perf_counter() - t0))
    for arch, tol in (("E", 0.015), ("H", 0.10)):
        n = EXPECTED_PARAMS[arch]
        rel = abs(n / (PUBLISHED_PARAMS_M[arch] * 1e6) - 1)
        out.append(Check(f"params {arch} within {tol:.1%} of {PUBLISHED_PARAMS_M[arch]}M", rel <= tol, rel, tol))
    for arch in ("A", "F", "G", "I", "J"):
        shown = round(EXPECTED_PARAMS[arch] / 1e6, 1)
        out.append(Check(f"params {arch} rounds to {PUBLISHED_PARAMS_M[arch]}M", shown == PUBLISHED_PARAMS_M[arch], shown, PUBLISHED_PARAMS_M[arch]))
    return out


# ------------------------------------------------------------------ oracles


def conv2d_oracle(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Direct nested-loop convolution with the same asymmetric padding."""
    n, c, h, wd = x.shape
    k = w.shape[0]
    xp = np.zeros((n, c, h + PAD_BEFORE + PAD_AFTER, wd + PAD_BEFORE + PAD_AFTER))
    xp[:, :, PAD_BEFORE : PAD_BEFORE + h, PAD_BEFORE : PAD_BEFORE + wd] = x
    y = np.zeros((n, k, h, wd))
    for b in range(n):
        for o in range(k):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for ch in range(c):
                        for di in range(KERNEL):
                            for dj in range(KERNEL):
                                acc += xp[b, ch, i + di, j + dj] * w[o, ch, di, dj]
                    y[b, o, i, j] = acc
    return y


def maxpool_oracle(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    y = np.empty((n, c, h // 2, w // 2))
    for b, ch, i, j in np.ndindex(n, c, h // 2, w // 2):
        y[b, ch, i, j] = max(x[b, ch, 2 * i + di, 2 * j + dj] for di in (0, 1) for dj in (0, 1))
    return y


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            c[i, j] = s
    return c


def lstm_oracle(wx, wh, bias, x, h, c):
    """Scalar-loop LSTM step with gate blocks i, f, g, o."""
    n, hidden = h.shape

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    h2, c2 = np.zeros_like(h), np.zeros_like(c)
    for b in range(n):
        for u in range(hidden):
            z = []
            for gate in range(4):
                col = gate * hidden + u
                s = bias[col]
                s += sum(x[b, t] * wx[t, col] for t in range(x.shape[1]))
                s += sum(h[b, t] * wh[t, col] for t in range(hidden))
                z.append(s)
            i, f, g, o = sig(z[0]), sig(z[1]), math.tanh(z[2]), sig(z[3])
            c2[b, u] = f * c[b, u] + i * g
            h2[b, u] = o * math.tanh(c2[b, u])
    return h2, c2


def _oracle_cases(name: str, cases: int, seed: int, case: Callable) -> Check:
    def run():
        rng = np.random.default_rng(seed)
        return max(case(rng) for _ in range(cases))

    return _timed(f"oracle {name} ({cases} cases)", ORACLE_TOL, run)


def _conv_case(rng):
    n, c, k = rng.integers(1, 3), rng.integers(1, 6), rng.integers(1, 6)
    h, w = rng.integers(1, 9), rng.integers(1, 9)
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((k, c, 4, 4))
    with precision("float64"):
        got = ops.conv2d(Tensor(x), Tensor(wt)).data
    return float(np.max(np.abs(got - conv2d_oracle(x, wt))))


def _pool_case(rng):
    n, c = rng.integers(1, 3), rng.integers(1, 4)
    h, w = 2 * rng.integers(1, 5), 2 * rng.integers(1, 5)
    x = rng.standard_normal((n, c, h, w))
    if rng.random() < 0.3:
        x = np.round(x)  # exercise ties
    with precision("float64"):
        got = ops.maxpool2d(Tensor(x)).data
    return float(np.max(np.abs(got - maxpool_oracle(x))))


def _matmul_case(rng):
    m, k, n = rng.integers(1, 9, size=3)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    with precision("float64"):
        got = ops.matmul(Tensor(a), Tensor(b)).data
    return float(np.max(np.abs(got - matmul_oracle(a, b))))


def _lstm_case(rng):
    n, d, hidden = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 5)
    with precision("float64"):
        cell = LstmCell(ParamRegistry(), "lstm", int(d), int(hidden))
        for t in (cell.w_x, cell.w_h, cell.b):
            t.data[...] = rng.standard_normal(t.shape)
        x, h, c = (rng.standard_normal(s) for s in ((n, d), (n, hidden), (n, hidden)))
        h2, c2 = lstm_step(cell, Tensor(x), Tensor(h), Tensor(c))
    eh, ec = lstm_oracle(cell.w_x.data, cell.w_h.data, cell.b.data, x, h, c)
    return float(max(np.max(np.abs(h2.data - eh)), np.max(np.abs(c2.data - ec))))


def oracle_suite(cases: int = 100, seed: int = 0) -> list[Check]:
    return [
        _oracle_cases("conv2d", cases, seed, _conv_case),
        _oracle_cases("maxpool2d", cases, seed + 1, _pool_case),
        _oracle_cases("matmul", cases, seed + 2, _matmul_case),
        _oracle_cases("lstm_step", cases, seed + 3, _lstm_case),
    ]


# -------------------------------------------------------------- gradients


def _weighted(y: Tensor, wts: np.ndarray) -> Tensor:
    """Scalar probe sum(y * wts); random weights avoid symmetric cancellations."""
    return ops.sum(ops.mul(y, Tensor(wts)))


def op_gradient_cases(seed: int = 0) -> dict:
    """name -> (builder, inputs); call inside ``precision("float64")``."""
    rng = np.random.default_rng(seed)

    def leaf(*shape, scale=1.0, offset=0.0):
        return Tensor(offset + scale * rng.standard_normal(shape), requires_grad=True)

    def probe(shape):
        return rng.standard_normal(shape)

    cases = {}
    a, b = leaf(3, 4), leaf(1, 4)
    pa = probe((3, 4))
    cases["add"] = (lambda: _weighted(ops.add(a, b), pa), [a, b])
    a2, b2 = leaf(3, 4), leaf(3, 1)
    cases["sub"] = (lambda: _weighted(ops.sub(a2, b2), pa), [a2, b2])
    a3, b3 = leaf(2, 3, 4), leaf(4)
    pm = probe((2, 3, 4))
    cases["mul"] = (lambda: _weighted(ops.mul(a3, b3), pm), [a3, b3])
    s = leaf(2, 5)
    cases["sum"] = (lambda: ops.mul(ops.sum(s), ops.sum(s)), [s])
    mn = leaf(3, 3)
    cases["mean"] = (lambda: ops.mul(ops.mean(mn), ops.mean(mn)), [mn])
    # keep relu inputs away from the kink at 0
    r = Tensor(np.where(rng.random((4, 5)) < 0.5, -1, 1) * (0.1 + rng.random((4, 5))), requires_grad=True)
    pr = probe((4, 5))
    cases["relu"] = (lambda: _weighted(ops.relu(r), pr), [r])
    sg = leaf(4, 5, scale=3.0)
    cases["sigmoid"] = (lambda: _weighted(ops.sigmoid(sg), pr), [sg])
    th = leaf(4, 5, scale=2.0)
    cases["tanh"] = (lambda: _weighted(ops.tanh(th), pr), [th])
    rs = leaf(2, 3, 4)
    prs = probe((4, 6))
    cases["reshape"] = (lambda: _weighted(ops.reshape(rs, (4, 6)), prs), [rs])
    fl = leaf(2, 3, 2, 2)
    pfl = probe((2, 12))
    cases["flatten"] = (lambda: _weighted(ops.flatten(fl), pfl), [fl])
    c1, c2 = leaf(2, 2), leaf(2, 3)
    pc = probe((2, 5))
    cases["concat"] = (lambda: _weighted(ops.concat([c1, c2], axis=1), pc), [c1, c2])
    sp = leaf(3, 6)
    psp = [probe((3, 2)), probe((3, 4))]
    cases["split"] = (
        lambda: ops.add(*[_weighted(t, p) for t, p in zip(ops.split(sp, [2, 4], axis=1), psp)]),
        [sp],
    )
    sl = leaf(5, 3)
    psl = probe((2, 3))
    cases["slice_axis"] = (lambda: _weighted(ops.slice_axis(sl, 1, 3, axis=0), psl), [sl])
    ma, mb = leaf(3, 4), leaf(4, 2)
    pmm = probe((3, 2))
    cases["matmul"] = (lambda: _weighted(ops.matmul(ma, mb), pmm), [ma, mb])
    lx, lw, lb = leaf(3, 4), leaf(4, 5), leaf(5)
    pl = probe((3, 5))
    cases["linear"] = (lambda: _weighted(ops.linear(lx, lw, lb), pl), [lx, lw, lb])
    cx, cw = leaf(2, 3, 6, 6), leaf(4, 3, 4, 4)
    pcv = probe((2, 4, 6, 6))
    cases["conv2d"] = (lambda: _weighted(ops.conv2d(cx, cw), pcv), [cx, cw])
    # distinct values so the argmax is stable under the perturbation
    px = Tensor(rng.permutation(72).reshape(1, 2, 6, 6) * 0.1, requires_grad=True)
    ppl = probe((1, 2, 3, 3))
    cases["maxpool2d"] = (lambda: _weighted(ops.maxpool2d(px), ppl), [px])
    bx, bg, bb = leaf(2, 3, 4, 4), leaf(3, offset=1.0, scale=0.3), leaf(3)
    pbn = probe((2, 3, 4, 4))
    cases["batchnorm2d[train]"] = (
        lambda: _weighted(ops.batchnorm2d(bx, bg, bb, RunningStats(3), train=True), pbn),
        [bx, bg, bb],
    )
    st = RunningStats(3)
    st.update(rng.standard_normal(3), 0.5 + rng.random(3))
    ex, eg, eb = leaf(2, 3, 4, 4), leaf(3, offset=1.0, scale=0.3), leaf(3)
    cases["batchnorm2d[eval]"] = (lambda: _weighted(ops.batchnorm2d(ex, eg, eb, st, train=False), pbn), [ex, eg, eb])
    dx = leaf(4, 6)
    pdx = probe((4, 6))
    cases["dropout"] = (
        lambda: _weighted(ops.dropout(dx, 0.5, True, np.random.default_rng(7)), pdx),
        [dx],
    )
    lg = leaf(5, 4, scale=2.0)
    labels = rng.integers(0, 4, size=5)
    cases["softmax_cross_entropy"] = (lambda: ops.softmax_cross_entropy(lg, labels), [lg])

    cell = LstmCell(ParamRegistry(), "lstm", 3, 4)
    for t in (cell.w_x, cell.w_h, cell.b):
        t.data[...] = 0.5 * rng.standard_normal(t.shape)
    xs = [leaf(2, 3) for _ in range(4)]
    h0, c0 = leaf(2, 4), leaf(2, 4)
    plstm = probe((2, 4))

    def chained():
        h, c = h0, c0
        for x in xs:
            h, c = lstm_step(cell, x, h, c)
        return ops.add(_weighted(h, plstm), _weighted(c, plstm))

    cases["lstm_step x4"] = (chained, [cell.w_x, cell.w_h, cell.b, *xs, h0, c0])
    return cases


def arch_gradient_check(
    arch: str, width: float = 1.0, n: int = 2, directions: int = 2, coords: int = 2, seed: int = 0
) -> float:
    """Full forward + loss of ``arch`` in train mode (batch statistics, fixed dropout mask).

    Every parameter is covered by ``directions`` random-direction checks;
    ``coords`` single coordinates of the first conv, FC2, classifier and
    (if present) LSTM recurrent weights are checked as well.
    """
    with precision("float64"):
        model = build(arch_spec(arch, width=width), seed=seed)
        rng = np.random.default_rng(seed)
        size = model.spec.input_size
        batch = {s: rng.random((n, 3, size, size)) for s in model.spec.scales}
        labels = rng.integers(0, model.spec.n_classes, size=n)

        def f():
            logits = model.forward(batch, train=True, rng=np.random.default_rng(seed + 1))
            return ops.softmax_cross_entropy(logits, labels)

        params = model.registry.tensors()
        worst = directional_check(f, params, h=ARCH_STEP, directions=directions, seed=seed)
        if coords:
            names = [nm for nm in model.registry.names() if nm.endswith("block0.weight")][:1]
            names += ["fc2.weight", "classifier.weight"]
            names += [nm for nm in model.registry.names() if nm.endswith("w_h")]
            for k, nm in enumerate(names):
                worst = max(worst, grad_check(f, [model.registry[nm]], h=ARCH_STEP, coords=coords, seed=seed + k))
    return worst


def grad_suite(archs=("A", "E", "F", "G", "H"), seed: int = 0, width: float = 1.0) -> list[Check]:
    out = []
    with precision("float64"):
        for name, (f, inputs) in op_gradient_cases(seed).items():
            out.append(_timed(f"grad {name}", GRAD_TOL, lambda: grad_check(f, inputs)))
    for arch in archs:
        coords = 1 if HIRES in arch_spec(arch).scales else 2
        out.append(
            _timed(
                f"grad architecture {arch} (2 samples, float64)",
                GRAD_TOL,
                lambda a=arch, c=coords: arch_gradient_check(a, width=width, coords=c, seed=seed),
            )
        )
    return out


SUITES = {"params": params_suite, "oracle": oracle_suite, "grad": grad_suite}
