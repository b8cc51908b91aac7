"""Tiled whole-slide inference and colour rendering of the resulting class raster."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.patches import HIRES_PATCH, MAX_FOV, PATCH, make_batch
from .data.synthetic import LEVEL_FACTOR, N_LEVELS, SyntheticSlide
from .zoo import HIRES, InputError, Model

SENTINEL = -1
SENTINEL_COLOUR = (128, 128, 128)
# class id -> RGB; lumen green, stroma purple, benign orange, tumour yellow
DEFAULT_PALETTE = {
    0: (46, 204, 113),
    1: (142, 68, 173),
    2: (230, 126, 34),
    3: (241, 196, 15),
}
# one 64-pixel patch at the highest magnification
DEFAULT_STRIDE = PATCH * LEVEL_FACTOR[N_LEVELS - 1]


@dataclass
class SlideRaster:
    """Class ids sampled on a regular grid.

    Cell (i, j) holds the prediction for the patch group centred at base
    pixel ``(origin[0] + j * stride, origin[1] + i * stride)``, or
    ``SENTINEL`` when that group's widest field of view leaves the slide.
    """

    grid: np.ndarray  # (rows, cols) int16
    stride: int
    origin: tuple = (0, 0)
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))

    @property
    def shape(self) -> tuple:
        return self.grid.shape

    def centre(self, i: int, j: int) -> tuple:
        return self.origin[0] + j * self.stride, self.origin[1] + i * self.stride

    def valid_fraction(self, label: int) -> float:
        valid = self.grid[self.grid != SENTINEL]
        return float(np.mean(valid == label)) if valid.size else 0.0

    def to_csv(self) -> str:
        rows = ["row,col,class_id"]
        for i, j in np.ndindex(*self.grid.shape):
            rows.append(f"{i},{j},{int(self.grid[i, j])}")
        return "\n".join(rows) + "\n"


def _needs(model: Model) -> list:
    return list(model.spec.scales)


def _group_arrays(slide: SyntheticSlide, centres, want_hires: bool):
    half = PATCH // 2
    scales = np.empty((len(centres), N_LEVELS, PATCH, PATCH, 3), dtype=np.uint8)
    hires = np.empty((len(centres), HIRES_PATCH, HIRES_PATCH, 3), dtype=np.uint8) if want_hires else None
    for n, (cx, cy) in enumerate(centres):
        for k in range(N_LEVELS):
            f = LEVEL_FACTOR[k]
            x, y = cx // f, cy // f
            scales[n, k] = slide.levels[k][y - half : y + half, x - half : x + half]
        if want_hires:
            h = HIRES_PATCH // 2
            hires[n] = slide.base[cy - h : cy + h, cx - h : cx + h]
    return scales, hires


def segment_slide(
    model: Model, slide: SyntheticSlide, stride: int = DEFAULT_STRIDE, batch_size: int = 64, origin=(0, 0)
) -> SlideRaster:
    """Classify a patch group at every grid point; batched, eval mode, deterministic."""
    if stride < 1 or stride % LEVEL_FACTOR[0]:
        raise ValueError(f"stride must be a positive multiple of {LEVEL_FACTOR[0]}, got {stride}")
    if origin[0] % LEVEL_FACTOR[0] or origin[1] % LEVEL_FACTOR[0]:
        raise ValueError(f"origin must be a multiple of {LEVEL_FACTOR[0]}, got {origin}")
    for s in _needs(model):
        if s == HIRES:
            continue
        if not isinstance(s, int) or s >= len(slide.levels):
            raise InputError(f"architecture {model.spec.id} needs scale {s!r}, slide has {len(slide.levels)} levels")
    if len(slide.levels) < N_LEVELS:
        raise InputError(f"slide {slide.slide_id} has {len(slide.levels)} of {N_LEVELS} pyramid levels")
    rows = math.ceil(slide.size / stride)
    cols = math.ceil(slide.size / stride)
    grid = np.full((rows, cols), SENTINEL, dtype=np.int16)
    half = MAX_FOV // 2
    cells = []
    for i in range(rows):
        cy = origin[1] + i * stride
        for j in range(cols):
            cx = origin[0] + j * stride
            if half <= cx <= slide.size - half and half <= cy <= slide.size - half:
                cells.append((i, j, cx, cy))
    want_hires = HIRES in model.spec.scales
    for s in range(0, len(cells), batch_size):
        chunk = cells[s : s + batch_size]
        scales, hires = _group_arrays(slide, [(c[2], c[3]) for c in chunk], want_hires)
        logits = model.forward(make_batch(scales, hires), train=False).data
        pred = logits.argmax(axis=1)
        for (i, j, _, _), p in zip(chunk, pred):
            grid[i, j] = p
    return SlideRaster(grid, stride, tuple(origin))


def render(raster: SlideRaster, palette: dict | None = None, scale: int = 1, size: tuple | None = None) -> np.ndarray:
    """Nearest-neighbour RGB image of ``raster``; ``size`` (width, height) overrides ``scale``."""
    palette = dict(raster.palette if palette is None else palette)
    palette.setdefault(SENTINEL, SENTINEL_COLOUR)
    ids = np.unique(raster.grid)
    missing = [int(c) for c in ids if int(c) not in palette]
    if missing:
        raise ValueError(f"palette has no colour for class ids {missing}")
    lut_keys = np.array(sorted(palette))
    lut = np.array([palette[k] for k in lut_keys], dtype=np.uint8)
    idx = np.searchsorted(lut_keys, raster.grid)
    img = lut[idx]
    rows, cols = raster.grid.shape
    if size is None:
        if scale < 1:
            raise ValueError(f"scale must be >= 1, got {scale}")
        return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    width, height = size
    ri = (np.arange(height) * rows) // height
    ci = (np.arange(width) * cols) // width
    return img[ri[:, None], ci[None, :]]


def write_outputs(raster: SlideRaster, png_path, csv_path=None, palette=None, scale: int = 1) -> None:
    """PNG overlay plus the ``row,col,class_id`` sidecar (next to the PNG by default)."""
    from PIL import Image

    png_path = Path(png_path)
    img = render(raster, palette, scale)
    Image.fromarray(img).save(png_path, format="PNG", optimize=False)
    csv_path = Path(csv_path) if csv_path is not None else png_path.with_suffix(".csv")
    csv_path.write_text(raster.to_csv())


def read_sidecar(path) -> np.ndarray:
    with open(path, newline="") as fh:
        recs = list(csv.DictReader(fh))
    rows = max(int(r["row"]) for r in recs) + 1
    cols = max(int(r["col"]) for r in recs) + 1
    grid = np.full((rows, cols), SENTINEL, dtype=np.int16)
    for r in recs:
        grid[int(r["row"]), int(r["col"])] = int(r["class_id"])
    return grid
