"""Slide-level splitting, ADAM, early stopping and the three-seed protocol."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import ops
from .core.rng import stream
from .core.tensor import Graph, Tensor
from .data.patches import PatchSet, augment_batch, dihedral, make_batch
from .metrics import f1_scores
from .zoo import HIRES, ArchSpec, Model, build, save

LOG_HEADER = ("epoch", "train_loss", "val_loss", "f1_c0", "f1_c1", "f1_c2", "f1_c3")


class TrainingError(RuntimeError):
    """The optimisation diverged (for example a NaN gradient)."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-5
    seeds: tuple = (1, 2, 3)
    fractions: tuple = (0.56, 0.14, 0.30)
    split_seed: int = 0
    augment: bool = True
    eval_batch_size: int = 128

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three values summing to 1, got {self.fractions}")
        if min(self.fractions) <= 0:
            raise ValueError(f"split fractions must be positive, got {self.fractions}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be a non-empty list of distinct integers, got {self.seeds}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_mapping(cls, d) -> "TrainConfig":
        """Build from a possibly string-valued mapping, ignoring unrelated keys."""
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, value in d.items():
            if key not in known:
                continue
            default = getattr(cls, key)
            kw[key] = _coerce(key, value, default)
        return cls(**kw)


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            parts = [p for p in value.replace(",", " ").split() if p]
            cast = type(default[0]) if default else float
            return tuple(cast(p) for p in parts)
    except ValueError as exc:
        raise ValueError(f"config key {key!r}: cannot parse {value!r}") from exc
    return value


# ------------------------------------------------------------------ splits


def split_by_slide(
    dataset: PatchSet, fractions: Sequence[float] = (0.56, 0.14, 0.30), rng: np.random.Generator | None = None
) -> tuple[PatchSet, PatchSet, PatchSet]:
    """Partition by slide id so that no slide contributes to two partitions.

    Slides are visited in a shuffled order and handed to train until its
    patch budget is met, then to validation, and the remainder to test.
    Each partition receives at least one slide.
    """
    if rng is None:
        rng = stream(0, "split")
    slides = sorted(set(dataset.slide_ids.tolist()))
    if len(slides) < 3:
        raise ValueError(f"need at least 3 slides for a three-way split, got {len(slides)}")
    order = [slides[i] for i in rng.permutation(len(slides))]
    sizes = {s: int(n) for s, n in zip(*np.unique(dataset.slide_ids, return_counts=True))}
    total = len(dataset)
    budgets = np.cumsum(fractions)[:2] * total
    parts: list[list[str]] = [[], [], []]
    seen = 0
    for i, s in enumerate(order):
        remaining = len(order) - i
        part = 0 if seen < budgets[0] - 1e-9 * total else (1 if seen < budgets[1] - 1e-9 * total else 2)
        # keep one slide in reserve for every later partition still empty
        later_empty = sum(1 for p in range(part + 1, 3) if not parts[p])
        if remaining <= later_empty and part < 2:
            part = next(p for p in range(part + 1, 3) if not parts[p])
        if part > 0 and not parts[part - 1]:
            part -= 1
        parts[part].append(s)
        seen += sizes[s]
    out = []
    for ids in parts:
        mask = np.isin(dataset.slide_ids, ids)
        out.append(dataset.subset(np.flatnonzero(mask)))
    return tuple(out)


# -------------------------------------------------------------------- ADAM


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Iterable[tuple[str, Tensor]], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected ADAM update from ``.grad``; grads are cleared afterwards.

    A parameter without a gradient is treated as having gradient zero.
    """
    params = list(params)
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        step = (cfg.learning_rate / c1) * m / (np.sqrt(v / c2) + cfg.eps_adam)
        p.data -= step.astype(p.data.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------- train log


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # one tuple per epoch, LOG_HEADER order
    best_epoch: int | None = None
    best_val_loss: float | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, epoch: int, train_loss: float, val_loss: float, f1) -> None:
        self.rows.append((int(epoch), float(train_loss), float(val_loss), *[float(v) for v in f1]))

    def column(self, name: str) -> list:
        k = LOG_HEADER.index(name)
        return [r[k] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in self.rows:
            w.writerow([r[0], *(repr(v) for v in r[1:])])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != LOG_HEADER:
            raise ValueError(f"unexpected train log header {header}")
        log = cls()
        for r in reader:
            log.append(int(r[0]), float(r[1]), float(r[2]), [float(v) for v in r[3:]])
        if log.rows:
            vals = log.column("val_loss")
            k = int(np.argmin(vals))
            log.best_epoch, log.best_val_loss = log.rows[k][0], vals[k]
        return log


# ---------------------------------------------------------------- training


def batch_for(model: Model, ps: PatchSet, idx, scales=None) -> dict:
    """Model input for rows ``idx`` of ``ps`` (optionally with replacement scale arrays)."""
    arr = ps.scales[idx] if scales is None else scales
    hires = None
    if HIRES in model.spec.scales:
        if ps.hires is None:
            raise ValueError(f"architecture {model.spec.id} needs high-resolution patches")
        hires = ps.hires[idx]
    return make_batch(arr, hires)


def predict_logits(model: Model, ps: PatchSet, batch_size: int = 128, scales=None) -> np.ndarray:
    """Eval-mode logits for every group of ``ps``; ``scales`` substitutes the scale patches."""
    out = np.zeros((len(ps), model.spec.n_classes), dtype=np.float64)
    for s in range(0, len(ps), batch_size):
        idx = np.arange(s, min(s + batch_size, len(ps)))
        sub = None if scales is None else scales[idx]
        out[idx] = model.forward(batch_for(model, ps, idx, sub), train=False).data
    return out


def evaluate_loss(model: Model, ps: PatchSet, batch_size: int = 128) -> tuple[float, np.ndarray]:
    logits = predict_logits(model, ps, batch_size)
    loss = float(ops.softmax_cross_entropy(Tensor(logits), ps.labels).item()) if len(ps) else math.nan
    return loss, logits


def train(
    model: Model,
    splits: Sequence[PatchSet],
    cfg: TrainConfig = TrainConfig(),
    seed: int = 1,
    verbose: bool = False,
) -> tuple[Model, TrainLog]:
    """Fit ``model`` on ``splits[0]``, select on ``splits[1]``; returns the best-validation model.

    Epoch ``e`` draws its shuffle, augmentation and dropout from the streams
    ``(seed, tag, e)``, so a run is reproducible from ``seed`` alone. Early
    stopping fires after ``cfg.patience`` epochs without a validation loss
    improvement of at least ``cfg.min_delta``; the returned state is the one
    with the lowest logged validation loss.
    """
    train_set, val_set = splits[0], splits[1]
    if len(train_set) == 0:
        raise ValueError("training split is empty")
    if len(val_set) == 0:
        raise ValueError("validation split is empty")
    log = TrainLog()
    model.meta = {"seed": int(seed), "epochs_run": 0, "best_val_loss": None}
    if cfg.max_epochs == 0:
        return model, log
    adam = AdamState()
    params = list(model.registry)
    best_state = None
    best_loss = math.inf
    ref_loss = math.inf  # last loss that counted as an improvement
    stale = 0
    n = len(train_set)
    for epoch in range(1, cfg.max_epochs + 1):
        order = stream(seed, "shuffle", epoch).permutation(n)
        aug_rng = stream(seed, "augment", epoch)
        drop_rng = stream(seed, "dropout", epoch)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            batch = _train_batch(model, train_set, idx, aug_rng if cfg.augment else None)
            with Graph() as g:
                logits = model.forward(batch, train=True, rng=drop_rng)
                loss = ops.softmax_cross_entropy(logits, train_set.labels[idx])
                g.backward(loss)
            lv = float(loss.item())
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            total += lv * len(idx)
            adam_step(params, adam, cfg)
        val_loss, logits = evaluate_loss(model, val_set, cfg.eval_batch_size)
        f1 = f1_scores(val_set.labels, logits.argmax(axis=1), model.spec.n_classes)
        log.append(epoch, total / n, val_loss, f1)
        if verbose:
            print(f"epoch {epoch:3d} train {total / n:.4f} val {val_loss:.4f} f1 {np.round(f1, 3).tolist()}")
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = model.copy_state()
            log.best_epoch, log.best_val_loss = epoch, val_loss
        if val_loss <= ref_loss - cfg.min_delta:
            ref_loss = val_loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state(best_state)
    model.meta = {"seed": int(seed), "epochs_run": len(log), "best_val_loss": best_loss}
    return model, log


def _train_batch(model: Model, ps: PatchSet, idx, rng) -> dict:
    """Batch with one dihedral transform per group, shared by all its patches."""
    if rng is None:
        return batch_for(model, ps, idx)
    scales, ts = augment_batch(ps.scales[idx], rng)
    hires = None
    if HIRES in model.spec.scales:
        hires = np.empty_like(ps.hires[idx])
        for t in range(8):
            sel = np.flatnonzero(ts == t)
            if sel.size:
                hires[sel] = dihedral(ps.hires[idx[sel]], t)
    return make_batch(scales, hires)


# -------------------------------------------------------------- triplicate


@dataclass
class RunSet:
    spec: ArchSpec
    cfg: TrainConfig
    models: list
    logs: list
    paths: list = field(default_factory=list)

    @property
    def seeds(self) -> tuple:
        return tuple(m.meta["seed"] for m in self.models)


def train_triplicate(
    spec: ArchSpec,
    dataset: PatchSet | Sequence[PatchSet],
    cfg: TrainConfig = TrainConfig(),
    out_dir=None,
    verbose: bool = False,
) -> RunSet:
    """Train ``spec`` once per configured seed; persist checkpoints and logs under ``out_dir``.

    ``dataset`` is either a full :class:`PatchSet` (split here with the
    ``split`` stream of ``cfg.split_seed``) or an existing (train, val, test)
    triple, so several architectures can share one split.
    """
    if isinstance(dataset, PatchSet):
        splits = split_by_slide(dataset, cfg.fractions, stream(cfg.split_seed, "split"))
    else:
        splits = tuple(dataset)
    runs = RunSet(spec, cfg, [], [])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        model = build(spec, seed)
        model, log = train(model, splits, cfg, seed, verbose=verbose)
        runs.models.append(model)
        runs.logs.append(log)
        if out is not None:
            ckpt = out / f"{spec.id}_seed{seed}.cseg"
            save(model, ckpt)
            log.write(out / f"{spec.id}_seed{seed}_log.csv")
            runs.paths.append(str(ckpt))
    if out is not None:
        manifest = {
            "arch": spec.to_json(),
            "config": cfg.to_json(),
            "runs": [
                {
                    "seed": seed,
                    "checkpoint": f"{spec.id}_seed{seed}.cseg",
                    "log": f"{spec.id}_seed{seed}_log.csv",
                    "epochs_run": len(log),
                    "best_val_loss": log.best_val_loss,
                }
                for seed, log in zip(cfg.seeds, runs.logs)
            ],
            "splits": {
                name: sorted(set(p.slide_ids.tolist())) for name, p in zip(("train", "val", "test"), splits)
            },
        }
        (out / "runset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return runs
