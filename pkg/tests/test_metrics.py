import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxseg.metrics import ConfusionCounts, confusion_counts, f1_from_runs, f1_scores, mean_counts


def cc(tp, fp, fn):
    return ConfusionCounts(np.atleast_1d(tp), np.atleast_1d(fp), np.atleast_1d(fn))


def test_perfect_run():
    assert f1_from_runs([cc(10, 0, 0)])[0] == 1.0


def test_no_true_positives():
    assert f1_from_runs([cc(0, 3, 4), cc(0, 1, 0)])[0] == 0.0


def test_empty_denominator_is_zero():
    assert f1_from_runs([cc(0, 0, 0)])[0] == 0.0


def test_pooled_runs_hand_arithmetic():
    f1 = f1_from_runs([cc(8, 2, 2), cc(10, 0, 4)])
    assert f1[0] == pytest.approx(18 / 22)


def test_mean_counts():
    m = mean_counts([cc(8, 2, 2), cc(10, 0, 4)])
    assert (m.tp[0], m.fp[0], m.fn[0]) == (9.0, 1.0, 3.0)


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        cc(-1, 0, 0)


def test_needs_a_run():
    with pytest.raises(ValueError):
        f1_from_runs([])


def test_confusion_counts():
    c = confusion_counts([0, 0, 1, 2, 3], [0, 1, 1, 2, 0], 4)
    assert c.tp == (1, 1, 1, 0)
    assert c.fp == (1, 1, 0, 0)
    assert c.fn == (1, 0, 0, 1)
    # TP + FN equals the class's ground-truth count
    assert [a + b for a, b in zip(c.tp, c.fn)] == [2, 1, 1, 1]


def test_json_round_trip():
    c = cc([1.5, 2.0], [0.0, 1.0], [3.0, 0.5])
    back = ConfusionCounts.from_json(c.to_json())
    assert back == c


@given(st.lists(st.integers(0, 3), min_size=1, max_size=40), st.integers(0, 2**16), st.integers(1, 5))
def test_identical_runs_equal_single_run(y, seed, k):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 4, size=len(y))
    one = confusion_counts(y, pred, 4)
    np.testing.assert_allclose(f1_from_runs([one] * k), one.f1())
    np.testing.assert_allclose(one.f1(), f1_scores(y, pred, 4))
    assert np.all((0 <= one.f1()) & (one.f1() <= 1))
