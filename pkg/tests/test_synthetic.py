import numpy as np
import pytest

from ctxseg.data.synthetic import (
    CLASS_NAMES,
    LEVEL_FACTOR,
    N_LEVELS,
    TEXTURE_AMPLITUDE,
    box_downsample,
    class_fractions,
    generate_slide,
    generate_slides,
    uniform_slide,
)


@pytest.fixture(scope="module")
def slides():
    return generate_slides(4, 1024, seed=0)


def test_deterministic():
    a, b = generate_slide(3, 1, 1024), generate_slide(3, 1, 1024)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.levels, b.levels))
    assert a.label_map.tobytes() == b.label_map.tobytes()


def test_slide_depends_only_on_seed_and_index():
    a = generate_slides(3, 1024, seed=5)[2]
    b = generate_slide(5, 2, 1024)
    assert a.base.tobytes() == b.base.tobytes()
    assert generate_slide(6, 2, 1024).base.tobytes() != b.base.tobytes()


def test_size_precondition():
    with pytest.raises(ValueError):
        generate_slide(0, 0, 512)
    with pytest.raises(ValueError):
        generate_slide(0, 0, 1030)


def test_pyramid_shapes_and_consistency(slides):
    s = slides[0]
    assert len(s.levels) == N_LEVELS
    for k in range(N_LEVELS):
        assert s.levels[k].shape == (s.size // LEVEL_FACTOR[k], s.size // LEVEL_FACTOR[k], 3)
        assert s.levels[k].dtype == np.uint8
    for k in range(N_LEVELS - 1):
        np.testing.assert_array_equal(box_downsample(s.levels[k + 1]), s.levels[k])
    assert s.label_map.shape == s.base.shape[:2]


def test_box_downsample_rounds_half_to_even():
    img = np.array([[[1], [2]], [[1], [2]]], dtype=np.uint8)  # mean 1.5 -> 2
    assert box_downsample(img)[0, 0, 0] == 2
    img = np.array([[[2], [3]], [[2], [3]]], dtype=np.uint8)  # mean 2.5 -> 2
    assert box_downsample(img)[0, 0, 0] == 2


def test_every_class_present():
    fr = class_fractions(generate_slides(28, 1024, seed=0))
    assert len(fr) == len(CLASS_NAMES)
    assert np.all(fr >= 0.10)


def _window_stats(slides, cls, side=64):
    """Per pure window: mean intensity and the even-minus-odd column difference."""
    rows = []
    for s in slides:
        lab = s.label_map
        img = s.base.astype(np.float64).mean(axis=-1)
        for y in range(0, s.size - side + 1, side):
            for x in range(0, s.size - side + 1, side):
                if np.all(lab[y : y + side, x : x + side] == cls):
                    w = img[y : y + side, x : x + side]
                    # the smooth morphology cancels; the period-2 grating does not
                    grating = (w[:, 0::2] - w[:, 1::2]).mean()
                    rows.append((w.mean(), grating))
    return len(rows), np.mean(rows, axis=0)


def test_benign_and_tumour_share_fine_texture():
    slides = generate_slides(6, 2048, seed=0)
    n2, s2 = _window_stats(slides, 2)
    n3, s3 = _window_stats(slides, 3)
    assert n2 > 100 and n3 > 100
    # same grating: amplitude 2 * TEXTURE_AMPLITUDE with the same phase
    assert s2[1] == pytest.approx(-2 * TEXTURE_AMPLITUDE, rel=0.02)
    assert s3[1] == pytest.approx(s2[1], rel=0.02)
    assert s3[0] == pytest.approx(s2[0], rel=0.01)


def test_fine_texture_vanishes_one_level_down():
    lum, stro = uniform_slide(0, 1024), uniform_slide(1, 1024)
    # the checkerboard dominates the highest magnification only
    hi = [np.abs(np.diff(s.base.astype(float), axis=1)).mean() for s in (lum, stro)]
    lo = [np.abs(np.diff(s.levels[2].astype(float), axis=1)).mean() for s in (lum, stro)]
    assert hi[0] > 2 * hi[1]
    assert abs(lo[0] - lo[1]) < 0.25 * lo[1]


@pytest.mark.parametrize("label", range(4))
def test_uniform_slide_label(label):
    s = uniform_slide(label, 1024)
    assert np.all(s.label_map == label)


def test_same_mean_colour_across_classes():
    means = np.array([uniform_slide(c, 1024).base.reshape(-1, 3).mean(axis=0) for c in range(4)])
    assert np.ptp(means, axis=0).max() < 3.0
