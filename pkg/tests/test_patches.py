import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxseg.data.patches import (
    HIRES_PATCH,
    MAX_FOV,
    NOISE_MEAN,
    PATCH,
    PatchSet,
    augment,
    augment_batch,
    corrupt_batch,
    corrupt_scales,
    dihedral,
    extract_patches,
    extract_patchset,
    grid_centres,
    group_at,
    make_batch,
)
from ctxseg.data.synthetic import generate_slide, uniform_slide


@pytest.fixture(scope="module")
def slide():
    return generate_slide(0, 0, 1024)


@pytest.fixture(scope="module")
def group(slide):
    return group_at(slide, 512, 512)


def test_uniform_slide_groups(slide):
    groups = extract_patches(uniform_slide(2, 1024), 128, hires=False)
    assert groups
    assert all(g.label == 2 and g.purity == 1.0 for g in groups)


def test_stride_equal_to_size_gives_one_group():
    assert len(extract_patches(uniform_slide(1, 1024), 1024, hires=False)) <= 1


def test_slide_smaller_than_fov():
    with pytest.raises(ValueError):
        grid_centres(MAX_FOV - 8, 64)


def test_group_shapes(group):
    assert group.scales.shape == (4, PATCH, PATCH, 3)
    assert group.hires.shape == (HIRES_PATCH, HIRES_PATCH, 3)


def test_hires_covers_same_field_as_lowest_scale(group):
    # box-averaging the 512 patch by 8 reproduces the scale-0 patch
    hi = group.hires.astype(np.float64)
    for _ in range(3):
        hi = hi.reshape(hi.shape[0] // 2, 2, hi.shape[1] // 2, 2, 3).mean(axis=(1, 3))
        hi = np.round(hi)
    assert np.max(np.abs(hi - group.scales[0])) <= 1


@pytest.mark.parametrize("k", range(3))
def test_alignment_between_magnifications(group, k):
    coarse = group.scales[k].astype(np.float64)
    fine = group.scales[k + 1].astype(np.float64)
    up = np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1)[32:96, 32:96]
    # compare against the fine patch at the coarser sampling rate
    fine_lp = np.repeat(np.repeat(fine.reshape(32, 2, 32, 2, 3).mean(axis=(1, 3)), 2, 0), 2, 1)
    r = np.corrcoef(up.reshape(-1), fine_lp.reshape(-1))[0, 1]
    assert r > 0.9


def test_centre_alignment_rule(slide):
    with pytest.raises(ValueError):
        group_at(slide, 513, 512)
    with pytest.raises(ValueError):
        group_at(slide, 8, 512)


def test_purity_filter(slide):
    loose = extract_patches(slide, 64, min_purity=0.0, hires=False)
    strict = extract_patches(slide, 64, min_purity=0.75, hires=False)
    assert len(strict) < len(loose)
    assert all(g.purity >= 0.75 for g in strict)


def test_patchset_round_trip(slide):
    groups = extract_patches(slide, 128, hires=False)
    ps = PatchSet.from_groups(groups)
    assert len(ps) == len(groups)
    g = ps.group(3)
    assert g.label == groups[3].label and g.center == groups[3].center
    np.testing.assert_array_equal(g.scales, groups[3].scales)
    sub = ps.subset([0, 2])
    assert len(sub) == 2 and sub.labels.tolist() == [groups[0].label, groups[2].label]


def test_extract_patchset_concat(slide):
    ps = extract_patchset([slide, generate_slide(0, 1, 1024)], 256)
    assert set(ps.slide_ids.tolist()) == {"slide000", "slide001"}


# ------------------------------------------------------------ augmentation


def test_dihedral_identity(group):
    np.testing.assert_array_equal(dihedral(group.scales, 0), group.scales)


def test_two_flips_restore():
    img = np.arange(4 * 4 * 3).reshape(4, 4, 3)
    np.testing.assert_array_equal(dihedral(dihedral(img, 4), 4), img)


def test_dihedral_group_is_distinct():
    img = np.arange(9 * 3).reshape(3, 3, 3)
    outs = {dihedral(img, t).tobytes() for t in range(8)}
    assert len(outs) == 8


def test_dihedral_range():
    with pytest.raises(ValueError):
        dihedral(np.zeros((2, 2, 3)), 8)


@given(st.integers(0, 2**16))
def test_augment_same_transform_everywhere(seed):
    rng = np.random.default_rng(seed)
    scales = rng.integers(0, 255, size=(4, 8, 8, 3), dtype=np.uint8)
    hires = rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
    from ctxseg.data.patches import PatchGroup

    g = PatchGroup("s", (0, 0), scales, 1, hires)
    out = augment(g, rng)
    assert out.label == 1
    for k in range(4):
        np.testing.assert_array_equal(out.scales[k], dihedral(scales[k], out.transform))
    np.testing.assert_array_equal(out.hires, dihedral(hires, out.transform))


def test_augment_batch_per_sample(rng):
    scales = rng.integers(0, 255, size=(16, 4, 8, 8, 3), dtype=np.uint8)
    out, ts = augment_batch(scales, rng)
    for i in range(16):
        np.testing.assert_array_equal(out[i], dihedral(scales[i], int(ts[i])))


# -------------------------------------------------------------- corruption


def test_corrupt_p0_identity(group, rng):
    out = corrupt_scales(group, 0.0, rng)
    np.testing.assert_array_equal(out.scales, group.scales)
    assert out.label == group.label and out.replaced == (False,) * 4


def test_corrupt_p1_replaces_everything(group, rng):
    out = corrupt_scales(group, 1.0, rng)
    assert out.replaced == (True,) * 4
    for k in range(4):
        assert out.scales[k].std() <= 1.5
        assert abs(out.scales[k].mean() - NOISE_MEAN) < 0.5
    assert out.label == group.label


def test_corrupt_fraction_concentrates(rng):
    scales = np.zeros((10_000, 4, 2, 2, 3), np.uint8)
    _, hit = corrupt_batch(scales, 0.3, rng)
    assert 0.28 <= hit.mean() <= 0.32


def test_corrupt_range(group, rng):
    with pytest.raises(ValueError):
        corrupt_scales(group, 1.5, rng)


def test_make_batch_normalises(group):
    b = make_batch(group.scales[None])
    assert b[0].shape == (1, 3, 64, 64)
    assert b[0].dtype == np.float32
    assert 0.0 <= b[0].min() and b[0].max() <= 1.0
