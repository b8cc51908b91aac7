import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxseg.core import ops
from ctxseg.core.rng import stream
from ctxseg.core.tensor import Graph, Tensor
from ctxseg.data.patches import PatchSet
from ctxseg.training import (
    LOG_HEADER,
    AdamState,
    TrainConfig,
    TrainingError,
    TrainLog,
    adam_step,
    predict_logits,
    split_by_slide,
    train,
    train_triplicate,
)
from ctxseg.zoo import arch_spec, build, checkpoint_bytes

TINY = 0.0625


def fake_set(sizes, labels=None, seed=0):
    """PatchSet with ``sizes[k]`` groups on slide k; pixel content is irrelevant here."""
    n = int(sum(sizes))
    ids = np.repeat([f"s{k:03d}" for k in range(len(sizes))], sizes)
    lab = np.zeros(n, np.int64) if labels is None else np.asarray(labels, np.int64)
    return PatchSet(
        np.zeros((n, 4, 1, 1, 3), np.uint8), lab, ids, np.zeros((n, 2), np.int64)
    )


def toy_set(n_slides=6, per_slide=8, seed=0):
    """Two classes of constant patches: dark (0) and bright (1)."""
    rng = np.random.default_rng(seed)
    labels = np.tile([0, 1], n_slides * per_slide // 2)
    level = np.where(labels == 1, 200, 40)[:, None, None, None, None]
    jitter = rng.integers(-10, 10, size=(len(labels), 1, 1, 1, 1))
    scales = np.broadcast_to(level + jitter, (len(labels), 4, 64, 64, 3)).astype(np.uint8)
    ids = np.repeat([f"t{k}" for k in range(n_slides)], per_slide)
    return PatchSet(scales.copy(), labels, ids, np.zeros((len(labels), 2), np.int64))


# ------------------------------------------------------------------ config


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam) == (2e-4, 0.9, 0.999, 1e-8)
    assert (cfg.batch_size, cfg.max_epochs, cfg.patience) == (64, 100, 10)
    assert cfg.fractions == (0.56, 0.14, 0.30)


@pytest.mark.parametrize(
    "kw", [dict(fractions=(0.5, 0.5, 0.5)), dict(batch_size=0), dict(seeds=()), dict(learning_rate=-1.0)]
)
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_json_round_trip():
    cfg = TrainConfig(max_epochs=7, seeds=(4, 5, 6))
    assert TrainConfig.from_mapping(cfg.to_json()) == cfg


def test_config_from_strings():
    cfg = TrainConfig.from_mapping({"max_epochs": "3", "learning_rate": "1e-3", "augment": "false"})
    assert cfg.max_epochs == 3 and cfg.learning_rate == 1e-3 and cfg.augment is False


# ------------------------------------------------------------------- split


def test_split_needs_three_slides():
    with pytest.raises(ValueError):
        split_by_slide(fake_set([5, 5]), rng=stream(0, "split"))


def test_split_hundred_equal_slides():
    parts = split_by_slide(fake_set([10] * 100), rng=stream(0, "split"))
    assert [len(set(p.slide_ids.tolist())) for p in parts] == [56, 14, 30]


def test_split_three_slides_one_each():
    parts = split_by_slide(fake_set([4, 4, 4]), rng=stream(0, "split"))
    assert [len(p) for p in parts] == [4, 4, 4]


def test_split_is_deterministic():
    ds = fake_set(list(range(3, 20)))
    a = split_by_slide(ds, rng=stream(3, "split"))
    b = split_by_slide(ds, rng=stream(3, "split"))
    for p, q in zip(a, b):
        assert p.slide_ids.tolist() == q.slide_ids.tolist()


@given(st.lists(st.integers(1, 40), min_size=3, max_size=30), st.integers(0, 2**16))
def test_split_property_disjoint_and_complete(sizes, seed):
    ds = fake_set(sizes)
    parts = split_by_slide(ds, rng=stream(seed, "split"))
    sets = [set(p.slide_ids.tolist()) for p in parts]
    assert all(sets)
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert sum(len(p) for p in parts) == len(ds)


# -------------------------------------------------------------------- adam


def _param(v):
    return [("p", Tensor(np.array(v, dtype=np.float64), requires_grad=True))]


def test_adam_zero_grad_leaves_params(f64):
    params = _param([1.0, -2.0])
    params[0][1].grad = np.zeros(2)
    adam_step(params, AdamState(), TrainConfig())
    assert params[0][1].data.tolist() == [1.0, -2.0]


def test_adam_first_step(f64):
    params = _param([1.0])
    params[0][1].grad = np.array([1.0])
    state = AdamState()
    adam_step(params, state, TrainConfig())
    assert state.t == 1
    assert params[0][1].data[0] == pytest.approx(1.0 - 2e-4 / (1 + 1e-8), abs=1e-12)
    assert params[0][1].grad is None


def test_adam_quadratic_descent(f64):
    p = Tensor(np.array([1.0]), requires_grad=True)
    cfg = TrainConfig(learning_rate=0.1)
    state = AdamState()
    for _ in range(50):
        with Graph() as g:
            loss = ops.sum(ops.mul(p, p))
        g.backward(loss)
        adam_step([("p", p)], state, cfg)
    assert abs(p.data[0]) < 0.5


def test_adam_nan_names_parameter(f64):
    params = _param([1.0])
    params[0][1].grad = np.array([np.nan])
    with pytest.raises(TrainingError, match="'p'"):
        adam_step(params, AdamState(), TrainConfig())


def test_adam_moments_start_at_zero(f64):
    params = _param([0.0])
    params[0][1].grad = np.array([2.0])
    state = AdamState()
    adam_step(params, state, TrainConfig())
    assert state.m["p"][0] == pytest.approx(0.2)
    assert state.v["p"][0] == pytest.approx(0.004)


# --------------------------------------------------------------------- log


def test_log_csv_round_trip(tmp_path):
    log = TrainLog()
    log.rows.append((1, 1.25, 1.5, 0.1, 0.2, 0.3, 0.4))
    log.rows.append((2, 0.75, 1.0 / 3.0, 0.5, 0.6, 0.7, 0.8))
    text = log.to_csv()
    assert text.splitlines()[0] == ",".join(LOG_HEADER)
    assert LOG_HEADER == ("epoch", "train_loss", "val_loss", "f1_c0", "f1_c1", "f1_c2", "f1_c3")
    assert TrainLog.from_csv(text).rows == log.rows


# ------------------------------------------------------------------- train


def _splits():
    ds = toy_set()
    return split_by_slide(ds, (0.5, 0.25, 0.25), stream(0, "split"))


def test_zero_epochs_returns_initial_model():
    model = build(arch_spec("A", width=TINY), seed=1)
    before = checkpoint_bytes(model, meta={})
    out, log = train(model, _splits(), TrainConfig(max_epochs=0), seed=1)
    assert len(log) == 0
    assert checkpoint_bytes(out, meta={}) == before


def test_empty_training_split():
    tr, va, te = _splits()
    with pytest.raises(ValueError):
        train(build(arch_spec("A", width=TINY), 1), (tr.subset([]), va, te), TrainConfig(max_epochs=1), 1)


def test_separable_toy_set_is_fitted():
    splits = _splits()
    cfg = TrainConfig(max_epochs=5, batch_size=8, learning_rate=1e-3, patience=5)
    model, log = train(build(arch_spec("A", width=0.125), 1), splits, cfg, seed=1)
    acc = np.mean(predict_logits(model, splits[0]).argmax(1) == splits[0].labels)
    assert acc == 1.0
    assert all(math.isfinite(r[1]) for r in log.rows)


def test_best_checkpoint_has_minimum_val_loss():
    from ctxseg.training import evaluate_loss

    splits = _splits()
    cfg = TrainConfig(max_epochs=4, batch_size=8, patience=2)
    model, log = train(build(arch_spec("A", width=TINY), 2), splits, cfg, seed=2)
    assert log.best_val_loss == min(log.column("val_loss"))
    assert evaluate_loss(model, splits[1])[0] == pytest.approx(log.best_val_loss, rel=1e-6)


def test_training_is_deterministic():
    splits = _splits()
    cfg = TrainConfig(max_epochs=2, batch_size=8)
    a, la = train(build(arch_spec("G", width=TINY), 3), splits, cfg, seed=3)
    b, lb = train(build(arch_spec("G", width=TINY), 3), splits, cfg, seed=3)
    assert la.to_csv() == lb.to_csv()
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_early_stopping_respects_patience():
    splits = _splits()
    cfg = TrainConfig(max_epochs=50, batch_size=8, patience=1, min_delta=10.0)
    _, log = train(build(arch_spec("A", width=TINY), 1), splits, cfg, seed=1)
    # nothing ever beats the first epoch by 10, so the run stops after patience epochs
    assert len(log) == 2


def test_triplicate(tmp_path):
    cfg = TrainConfig(max_epochs=1, batch_size=8)
    spec = arch_spec("A", width=TINY)
    runs = train_triplicate(spec, _splits(), cfg, out_dir=tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == [
        "A_seed1.cseg", "A_seed1_log.csv", "A_seed2.cseg", "A_seed2_log.csv",
        "A_seed3.cseg", "A_seed3_log.csv", "runset.json",
    ]
    blobs = [checkpoint_bytes(m) for m in runs.models]
    assert len(set(blobs)) == 3
    again = train_triplicate(spec, _splits(), cfg, out_dir=tmp_path / "again")
    assert [checkpoint_bytes(m) for m in again.models] == blobs
    for name in files:
        assert (tmp_path / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
