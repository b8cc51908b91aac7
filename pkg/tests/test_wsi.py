import numpy as np
import pytest
from PIL import Image

from ctxseg.core.tensor import Tensor
from ctxseg.data.patches import MAX_FOV, extract_patchset
from ctxseg.data.synthetic import generate_slide, uniform_slide
from ctxseg.evaluation import populated_model
from ctxseg.metrics import f1_scores
from ctxseg.training import predict_logits
from ctxseg.wsi import (
    DEFAULT_PALETTE,
    SENTINEL,
    SENTINEL_COLOUR,
    SlideRaster,
    read_sidecar,
    render,
    segment_slide,
    write_outputs,
)
from ctxseg.zoo import InputError, arch_spec


class TextureReader:
    """Stand-in classifier reading the fine texture: checkerboard -> 0, flat -> 1, stripes -> 2."""

    spec = arch_spec("D", width=0.0625)

    def forward(self, batch, train=False, rng=None):
        x = batch[3].mean(axis=1)
        dx = np.abs(np.diff(x, axis=2)).mean(axis=(1, 2))
        dy = np.abs(np.diff(x, axis=1)).mean(axis=(1, 2))
        k = np.where(dx < 0.1, 1, np.where(dy > 0.1, 0, 2))
        return Tensor(np.eye(4)[k])


@pytest.fixture(scope="module")
def small_model():
    return populated_model("G", width=0.0625, seed=0)


@pytest.fixture(scope="module")
def slide():
    return generate_slide(0, 0, 1024)


def test_uniform_slide_consistency():
    s = uniform_slide(0, 1024, seed=3)
    model = TextureReader()
    ps = extract_patchset([s], 128)
    assert f1_scores(ps.labels, predict_logits(model, ps).argmax(1), 4)[0] >= 0.9
    raster = segment_slide(model, s, stride=64)
    assert raster.valid_fraction(0) >= 0.9


def test_grid_extent_and_sentinels(slide, small_model):
    r = segment_slide(small_model, slide, stride=96)
    assert r.shape == (11, 11)  # ceil(1024 / 96)
    assert r.grid[0, 0] == SENTINEL
    i, j = 5, 5  # centre (480, 480) fits
    assert r.grid[i, j] != SENTINEL
    assert set(np.unique(r.grid)) <= {SENTINEL, 0, 1, 2, 3}


def test_non_overlapping_tiling():
    s = uniform_slide(1, 1024)
    r = segment_slide(TextureReader(), s, stride=MAX_FOV, origin=(MAX_FOV // 2, MAX_FOV // 2))
    assert r.shape == (2, 2)
    # fields [0, 512) and [512, 1024) tile each axis exactly
    assert np.sum(r.grid != SENTINEL) == (1024 // MAX_FOV) ** 2
    assert np.all(r.grid == 1)


def test_cells_equal_patch_predictions(slide, small_model):
    r = segment_slide(small_model, slide, stride=128)
    from ctxseg.data.patches import PatchSet, group_at

    cells = [(i, j) for i, j in np.ndindex(*r.shape) if r.grid[i, j] != SENTINEL]
    groups = [group_at(slide, *r.centre(i, j), hires=False) for i, j in cells]
    pred = predict_logits(small_model, PatchSet.from_groups(groups)).argmax(1)
    assert pred.tolist() == [int(r.grid[i, j]) for i, j in cells]


def test_halving_stride_refines(slide, small_model):
    coarse = segment_slide(small_model, slide, stride=128)
    fine = segment_slide(small_model, slide, stride=64)
    np.testing.assert_array_equal(fine.grid[::2, ::2], coarse.grid)


def test_deterministic(slide, small_model):
    a = segment_slide(small_model, slide, stride=128)
    b = segment_slide(small_model, slide, stride=128)
    assert a.grid.tobytes() == b.grid.tobytes()


def test_stride_must_align(slide, small_model):
    with pytest.raises(ValueError):
        segment_slide(small_model, slide, stride=100)


def test_missing_levels_is_input_error(slide, small_model):
    from dataclasses import replace

    short = replace(slide, levels=slide.levels[:2])
    with pytest.raises(InputError):
        segment_slide(small_model, short, stride=128)


def test_render_single_cell():
    img = render(SlideRaster(np.array([[2]], np.int16), 64), scale=5)
    assert img.shape == (5, 5, 3)
    assert np.all(img == DEFAULT_PALETTE[2])
    assert DEFAULT_PALETTE[2] == (230, 126, 34)


def test_render_sentinel_grey():
    img = render(SlideRaster(np.array([[SENTINEL, 0]], np.int16), 64))
    assert tuple(img[0, 0]) == SENTINEL_COLOUR == (128, 128, 128)
    assert tuple(img[0, 1]) == (46, 204, 113)


def test_render_dimensions():
    r = SlideRaster(np.zeros((3, 7), np.int16), 64)
    assert render(r, scale=4).shape == (12, 28, 3)
    assert render(r, size=(70, 30)).shape == (30, 70, 3)


def test_render_missing_palette_entry():
    with pytest.raises(ValueError, match="3"):
        render(SlideRaster(np.array([[3]], np.int16), 64), palette={0: (0, 0, 0)})


def test_write_outputs(tmp_path):
    grid = np.array([[0, 1], [SENTINEL, 3]], np.int16)
    png = tmp_path / "seg.png"
    write_outputs(SlideRaster(grid, 64), png, scale=2)
    with Image.open(png) as im:
        assert im.size == (4, 4) and im.mode == "RGB"
    lines = (tmp_path / "seg.csv").read_text().splitlines()
    assert lines[0] == "row,col,class_id"
    assert len(lines) == 5
    np.testing.assert_array_equal(read_sidecar(tmp_path / "seg.csv"), grid)
