"""F1 tables, colour ranks, rank-sums, and the noise, order and timing experiments.

Ranks follow the relative-to-best colour code: the best value in a row is
rank 1 (ties go to the method listed first); any other value v gets rank
2, 3, 4 or 5 for the tightest of v >= best * (0.975, 0.95, 0.90, 0.85) it
satisfies, and rank 6 otherwise.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core.rng import stream
from .core.tensor import StateError
from .data.patches import PatchSet, corrupt_batch
from .metrics import ConfusionCounts, confusion_counts, f1_from_runs
from .training import TrainConfig, predict_logits, train_triplicate
from .zoo import Model, arch_spec

METHODS = ("A", "B", "C", "D", "E", "F", "G", "H", "I", "J")
RANK_THRESHOLDS = (0.975, 0.95, 0.90, 0.85)
NOISE_LEVELS = (0.1, 0.3, 0.5)
ORDERS = ("low_to_high", "high_to_low", "random_fixed", "bidirectional")

# Published per-class F1 (rows) for methods A-J (columns).
PUBLISHED_F1 = {
    "Prostate": {
        "Lumen": (0.728, 0.663, 0.705, 0.716, 0.739, 0.738, 0.748, 0.713, 0.722, 0.758),
        "Stroma": (0.797, 0.855, 0.849, 0.790, 0.875, 0.869, 0.884, 0.891, 0.862, 0.883),
        "Benign": (0.508, 0.646, 0.712, 0.717, 0.734, 0.745, 0.766, 0.763, 0.765, 0.782),
        "Tumour": (0.562, 0.653, 0.629, 0.579, 0.699, 0.687, 0.728, 0.746, 0.674, 0.712),
    },
    "Breast": {
        "Normal": (0.501, 0.468, 0.523, 0.513, 0.509, 0.603, 0.573, 0.252, 0.241, 0.323),
        "Benign": (0.453, 0.468, 0.482, 0.444, 0.410, 0.369, 0.423, 0.489, 0.333, 0.437),
        "InSitu": (0.468, 0.476, 0.486, 0.533, 0.615, 0.614, 0.581, 0.286, 0.311, 0.452),
        "Invasive": (0.401, 0.477, 0.430, 0.540, 0.557, 0.548, 0.576, 0.520, 0.446, 0.580),
    },
}
PUBLISHED_RANK_SUMS = {
    "Prostate": (20, 19, 17, 19, 13, 13, 8, 8, 12, 7),
    "Breast": (22, 21, 19, 18, 16, 13, 14, 18, 24, 18),
}


class AggregationError(ValueError):
    """Runs or tables that cannot be combined into one report."""


# ------------------------------------------------------------------- ranks


def color_rank(row: Sequence[float]) -> list[int]:
    """Ranks 1-6 for one class row; comparisons are >= on the values as given."""
    vals = [float(v) for v in row]
    if not vals:
        raise ValueError("cannot rank an empty row")
    best_i = int(np.argmax(vals))  # first occurrence of the maximum
    best = vals[best_i]
    ranks = []
    for i, v in enumerate(vals):
        if i == best_i:
            ranks.append(1)
            continue
        r = 6
        for k, frac in enumerate(RANK_THRESHOLDS):
            if v >= best * frac:
                r = k + 2
                break
        ranks.append(r)
    return ranks


@dataclass
class MetricsTable:
    """F1 per (dataset, class, method), with optional run-level confusion counts."""

    methods: tuple
    f1: dict  # dataset -> class -> tuple of F1 in ``methods`` order
    counts: dict = field(default_factory=dict)  # (dataset, method) -> list[ConfusionCounts]
    params: dict = field(default_factory=dict)  # method -> parameter count
    times: dict = field(default_factory=dict)  # method -> seconds

    def __post_init__(self):
        for ds, rows in self.f1.items():
            for cls, row in rows.items():
                if len(row) != len(self.methods):
                    raise AggregationError(f"{ds}/{cls}: {len(row)} values for {len(self.methods)} methods")
                if any(not 0.0 <= v <= 1.0 for v in row):
                    raise ValueError(f"{ds}/{cls}: F1 values must lie in [0, 1]")

    @classmethod
    def published(cls) -> "MetricsTable":
        return cls(METHODS, {ds: dict(rows) for ds, rows in PUBLISHED_F1.items()})

    @classmethod
    def from_runs(cls, dataset: str, runs: Mapping[str, Sequence[ConfusionCounts]], class_names) -> "MetricsTable":
        methods = tuple(runs)
        f1 = {m: f1_from_runs(list(r)) for m, r in runs.items()}
        sizes = {len(v) for v in f1.values()}
        if sizes != {len(class_names)}:
            raise AggregationError("runs disagree with the class table on the number of classes")
        rows = {c: tuple(float(f1[m][k]) for m in methods) for k, c in enumerate(class_names)}
        return cls(methods, {dataset: rows}, {(dataset, m): list(r) for m, r in runs.items()})


@dataclass
class RankTable:
    methods: tuple
    ranks: dict  # dataset -> class -> tuple of ranks
    sums: dict  # dataset -> tuple of rank-sums
    total: tuple

    def best_method(self) -> str:
        return self.methods[int(np.argmin(self.total))]


def rank_table(table: MetricsTable) -> RankTable:
    ranks = {ds: {c: tuple(color_rank(row)) for c, row in rows.items()} for ds, rows in table.f1.items()}
    sums, total = rank_sum(ranks, len(table.methods))
    return RankTable(table.methods, ranks, sums, total)


def rank_sum(ranks: Mapping[str, Mapping[str, Sequence[int]]], n_methods: int | None = None) -> tuple[dict, tuple]:
    """Per-dataset rank-sums over classes and their total across datasets."""
    sums = {}
    for ds, rows in ranks.items():
        arr = np.array(list(rows.values()), dtype=np.int64)
        sums[ds] = tuple(int(v) for v in arr.sum(axis=0))
    if n_methods is None:
        n_methods = len(next(iter(sums.values()))) if sums else 0
    total = np.zeros(n_methods, dtype=np.int64)
    for s in sums.values():
        total += np.asarray(s)
    return sums, tuple(int(v) for v in total)


# ----------------------------------------------------------------- reports

CSV_HEADER = ("method", "class", "f1", "rank")


def report_csv(table: MetricsTable, ranks: RankTable | None = None) -> str:
    """``method,class,f1,rank`` rows; the class column reads ``dataset/class``."""
    ranks = ranks or rank_table(table)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for ds, rows in table.f1.items():
        for cls, row in rows.items():
            for m, v, r in zip(table.methods, row, ranks.ranks[ds][cls]):
                w.writerow([m, f"{ds}/{cls}", f"{v:.3f}", r])
    return buf.getvalue()


def parse_csv(text: str) -> tuple[MetricsTable, dict]:
    """Inverse of :func:`report_csv`; returns the table and the stored ranks."""
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader, ()))
    if header[:3] != CSV_HEADER[:3]:
        raise AggregationError(f"expected header starting {','.join(CSV_HEADER[:3])}, got {','.join(header)}")
    methods: list[str] = []
    values: dict = {}
    stored: dict = {}
    for rec in reader:
        if not rec:
            continue
        m, key, v = rec[0], rec[1], float(rec[2])
        ds, _, cls = key.partition("/")
        if not cls:
            ds, cls = "data", key
        if m not in methods:
            methods.append(m)
        values.setdefault(ds, {}).setdefault(cls, {})[m] = v
        if len(rec) > 3 and rec[3]:
            stored.setdefault(ds, {}).setdefault(cls, {})[m] = int(rec[3])
    f1 = {}
    for ds, rows in values.items():
        f1[ds] = {}
        for cls, cells in rows.items():
            missing = [m for m in methods if m not in cells]
            if missing:
                raise AggregationError(f"{ds}/{cls} lacks values for {', '.join(missing)}")
            f1[ds][cls] = tuple(cells[m] for m in methods)
    ranks = {
        ds: {cls: tuple(cells[m] for m in methods) for cls, cells in rows.items()} for ds, rows in stored.items()
    }
    return MetricsTable(tuple(methods), f1), ranks


def report_markdown(table: MetricsTable, ranks: RankTable | None = None) -> str:
    """Dataset/class rows of ``f1 (rank)`` cells, then rank-sum, parameter and timing rows."""
    ranks = ranks or rank_table(table)
    head = ["Dataset", "Class", *table.methods]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for ds, rows in table.f1.items():
        for cls, row in rows.items():
            cells = [f"{v:.3f} ({r})" for v, r in zip(row, ranks.ranks[ds][cls])]
            lines.append("| " + " | ".join([ds, cls, *cells]) + " |")
    for ds, s in ranks.sums.items():
        lines.append("| " + " | ".join([f"Rank-sum ({ds})", "", *map(str, s)]) + " |")
    lines.append("| " + " | ".join(["Total rank-sum", "", *map(str, ranks.total)]) + " |")
    if table.params:
        cells = [_fmt_params(table.params.get(m)) for m in table.methods]
        lines.append("| " + " | ".join(["No. of parameters", "", *cells]) + " |")
    if table.times:
        cells = [f"{table.times[m]:.2f}" if m in table.times else "" for m in table.methods]
        lines.append("| " + " | ".join(["Running time (s)", "", *cells]) + " |")
    return "\n".join(lines) + "\n"


def _fmt_params(n) -> str:
    return "" if n is None else f"{n / 1e6:.1f}M ({n:,})"


def parse_markdown(text: str) -> tuple[MetricsTable, dict]:
    """Read the F1 cells of :func:`report_markdown` back; summary rows are skipped."""
    rows = [ln.strip() for ln in text.splitlines() if ln.strip().startswith("|")]
    if len(rows) < 2:
        raise AggregationError("no markdown table found")
    head = [c.strip() for c in rows[0].strip("|").split("|")]
    methods = tuple(head[2:])
    f1: dict = {}
    stored: dict = {}
    for ln in rows[2:]:
        cells = [c.strip() for c in ln.strip("|").split("|")]
        label = cells[0]
        if label.startswith(("Rank-sum", "Total rank-sum", "No. of parameters", "Running time")):
            continue
        ds, cls = label, cells[1]
        vals, rks = [], []
        for c in cells[2:]:
            v, _, r = c.partition(" (")
            vals.append(float(v))
            rks.append(int(r.rstrip(")")))
        f1.setdefault(ds, {})[cls] = tuple(vals)
        stored.setdefault(ds, {})[cls] = tuple(rks)
    return MetricsTable(methods, f1), stored


# ------------------------------------------------------------ model scoring


def run_counts(models: Sequence[Model], test: PatchSet, batch_size: int = 128, scales=None) -> list[ConfusionCounts]:
    out = []
    for m in models:
        pred = predict_logits(m, test, batch_size, scales).argmax(axis=1)
        out.append(confusion_counts(test.labels, pred, m.spec.n_classes))
    return out


def delta_f1_percent(f1_p, f1_0) -> np.ndarray:
    """Relative change ``100 * (F1_p - F1_0) / F1_0`` per class."""
    if f1_0 is None:
        raise StateError("noise experiment needs the zero-noise baseline F1")
    f1_0 = np.asarray(f1_0, dtype=np.float64)
    if np.any(f1_0 <= 0):
        raise StateError(f"baseline F1 must be positive for every class, got {f1_0.tolist()}")
    return 100.0 * (np.asarray(f1_p, dtype=np.float64) - f1_0) / f1_0


@dataclass
class NoiseResult:
    levels: tuple
    baseline: dict  # model -> F1 per class at p = 0
    f1: dict  # (model, p) -> F1 per class
    delta: dict  # (model, p) -> delta F1 % per class

    def mean_abs(self, model: str, p: float) -> float:
        return float(np.mean(np.abs(self.delta[(model, p)])))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "p", "class", "f1", "delta_f1_pct"])
        for (model, p), d in self.delta.items():
            for k, (f, v) in enumerate(zip(self.f1[(model, p)], d)):
                w.writerow([model, f"{p:g}", k, f"{f:.6f}", f"{v:.6f}"])
        return buf.getvalue()


def noise_experiment(
    runsets: Mapping[str, Sequence[Model]],
    test: PatchSet,
    levels: Sequence[float] = NOISE_LEVELS,
    seed: int = 0,
    batch_size: int = 128,
) -> NoiseResult:
    """Corrupt each scale patch with probability p and report the F1 change per class.

    The corruption for level index ``i`` comes from the ``noise`` stream
    ``(seed, i)`` and is shared by every model and run, so the comparison
    between models is paired.
    """
    baseline = {name: f1_from_runs(run_counts(ms, test, batch_size)) for name, ms in runsets.items()}
    f1, delta = {}, {}
    for i, p in enumerate(levels):
        corrupted, _ = corrupt_batch(test.scales, float(p), stream(seed, "noise", i))
        for name, ms in runsets.items():
            f1[(name, p)] = f1_from_runs(run_counts(ms, test, batch_size, corrupted))
            delta[(name, p)] = delta_f1_percent(f1[(name, p)], baseline[name])
    return NoiseResult(tuple(levels), baseline, f1, delta)


@dataclass
class OrderResult:
    orders: tuple
    f1: dict  # order -> F1 per class
    runsets: dict = field(default_factory=dict)

    def spread(self) -> np.ndarray:
        arr = np.array([self.f1[o] for o in self.orders])
        return arr.max(axis=0) - arr.min(axis=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["order", "class", "f1"])
        for o in self.orders:
            for k, v in enumerate(self.f1[o]):
                w.writerow([o, k, f"{v:.6f}"])
        return buf.getvalue()


def order_experiment(
    splits: Sequence[PatchSet],
    cfg: TrainConfig = TrainConfig(),
    orders: Sequence[str] = ORDERS,
    width: float = 1.0,
    out_dir=None,
    trained: Mapping[str, Sequence[Model]] | None = None,
) -> OrderResult:
    """Train G under each scale order (G_BIDIR for ``bidirectional``) and pool test F1.

    ``trained`` may supply already-trained runs for some orders, which are
    then evaluated rather than retrained.
    """
    f1, runsets = {}, {}
    for order in orders:
        if trained and order in trained:
            models = list(trained[order])
        else:
            arch = "G_BIDIR" if order == "bidirectional" else "G"
            spec = arch_spec(arch, width=width, scale_order=order)
            sub = None if out_dir is None else f"{out_dir}/{order}"
            models = train_triplicate(spec, splits, cfg, sub).models
        runsets[order] = models
        f1[order] = f1_from_runs(run_counts(models, splits[2], cfg.eval_batch_size))
    return OrderResult(tuple(orders), f1, runsets)


def time_models(models: Mapping[str, Model], test: PatchSet, batch_size: int = 16, repeats: int = 1) -> dict:
    """Wall-clock eval-mode inference over the whole of ``test``, per model.

    Each model gets one discarded warm-up pass; the reported time is the
    minimum over ``repeats`` timed passes. Runs in this thread only.
    """
    out = {}
    for name, model in models.items():
        predict_logits(model, test, batch_size)
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            predict_logits(model, test, batch_size)
            best = min(best, time.perf_counter() - t0)
        out[name] = float(best)
    return out


def populated_model(arch: str, width: float = 1.0, seed: int = 0, n: int = 4) -> Model:
    """Freshly initialised model whose batch-norm statistics come from one train-mode pass.

    Inference cost does not depend on weight values, so this stands in for a
    trained checkpoint when only timing matters.
    """
    from .zoo import build

    model = build(arch_spec(arch, width=width), seed=seed)
    rng = stream(seed, "data", 99)
    size = model.spec.input_size
    batch = {s: rng.random((n, 3, size, size), dtype=np.float32) for s in model.spec.scales}
    model.forward(batch, train=True, rng=stream(seed, "dropout", 99))
    return model
