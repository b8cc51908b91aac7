"""Procedural multi-scale slides whose classes can only be told apart with context.

Each class is a pair (fine texture, coarse morphology):

====  ========  ===================  ===========
id    name      fine texture         morphology
====  ========  ===================  ===========
0     lumen     checkerboard         bands
1     stroma    none                 lattice
2     benign    vertical stripes     bands
3     tumour    vertical stripes     lattice
====  ========  ===================  ===========

Textures are period-2 gratings on the base pixel grid, so the 2x2 box
filter that builds the next pyramid level cancels them exactly; only the
highest magnification resolves them. The three texture types (checkerboard,
stripes, none) stay distinct under the dihedral augmentations, which would
map horizontal onto vertical stripes.

Morphology is a soft square wave in intensity of period ``MORPH_PERIOD``:
straight bands, or a checker lattice made by multiplying the bands with
their perpendicular copy. A 64-pixel window shows at most one
flat-to-flat step of either layout; the lattice only becomes recognisable
in the wide fields of view.
Every class has the same mean colour. Hence no single magnification can
separate tumour from benign: the fine scale confuses them with each other,
the coarse scales confuse them with stroma and lumen respectively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..core.rng import stream

CLASS_NAMES = ("lumen", "stroma", "benign", "tumour")
N_LEVELS = 4
# base-pixel downsampling factor per pyramid level (level 3 = base)
LEVEL_FACTOR = {0: 8, 1: 4, 2: 2, 3: 1}

MEAN_COLOUR = np.array([165.0, 120.0, 160.0])
MORPH_TINT = np.array([0.7, 1.0, 0.6])
MORPH_AMPLITUDE = 36.0
TEXTURE_AMPLITUDE = 22.0
PIXEL_NOISE = 10.0
MORPH_PERIOD = 256
MORPH_SHARPNESS = 4.0
REGION_SIGMA = 200.0  # smoothing of the white-noise fields behind the label map
FIELD_DOWNSAMPLE = 8
LATTICE = (False, True, False, True)  # morphology per class id


@dataclass
class SyntheticSlide:
    slide_id: str
    seed: int
    label_map: np.ndarray  # (S, S) uint8 class ids at base resolution
    levels: list = field(default_factory=list)  # levels[k]: (S/f, S/f, 3) uint8

    @property
    def size(self) -> int:
        return self.label_map.shape[0]

    @property
    def base(self) -> np.ndarray:
        return self.levels[N_LEVELS - 1]


def box_downsample(img: np.ndarray) -> np.ndarray:
    """2x2 mean, rounded half-to-even back to uint8."""
    h, w = img.shape[:2]
    v = img.astype(np.float64).reshape(h // 2, 2, w // 2, 2, *img.shape[2:]).mean(axis=(1, 3))
    return np.round(v).astype(np.uint8)


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = size // FIELD_DOWNSAMPLE
    noise = rng.standard_normal((coarse, coarse))
    smooth = ndimage.gaussian_filter(noise, REGION_SIGMA / FIELD_DOWNSAMPLE, mode="wrap")
    full = ndimage.zoom(smooth, FIELD_DOWNSAMPLE, order=1, mode="grid-wrap", grid_mode=True)
    return full[:size, :size]


def make_label_map(rng: np.random.Generator, size: int) -> np.ndarray:
    """Three thresholded smooth fields: texture group, lumen/stroma, benign/tumour."""
    a, b, c = (_smooth_field(rng, size) for _ in range(3))
    shared = a > np.median(a)  # territory of the vertical-stripe texture
    labels = np.empty((size, size), dtype=np.uint8)
    rest = ~shared
    labels[rest] = np.where(c[rest] > np.median(c[rest]), 1, 0)
    labels[shared] = np.where(b[shared] > np.median(b[shared]), 3, 2)
    return labels


def _square(phase: np.ndarray) -> np.ndarray:
    """Soft square wave in [-1, 1]."""
    return np.tanh(MORPH_SHARPNESS * np.cos(phase)) / np.tanh(MORPH_SHARPNESS)


def _morphology(rng: np.random.Generator, size: int, labels: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi / 2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    v = -xx * np.sin(theta) + yy * np.cos(theta)
    bands = _square(2 * np.pi * u / MORPH_PERIOD + phase[0])
    k = 2 * np.pi / MORPH_PERIOD
    lattice = _square(k * u + phase[0]) * _square(k * v + phase[1])
    return np.where(np.asarray(LATTICE)[labels], lattice, bands)


def _texture(size: int, labels: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    checker = ((xx + yy) % 2) * 2.0 - 1.0
    vertical = (xx % 2) * 2.0 - 1.0
    return np.choose(labels, [checker, np.zeros((size, size)), vertical, vertical])


def render(rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    size = labels.shape[0]
    morph = _morphology(rng, size, labels)
    tex = _texture(size, labels)
    img = MEAN_COLOUR + MORPH_AMPLITUDE * morph[..., None] * MORPH_TINT
    img = img + TEXTURE_AMPLITUDE * tex[..., None]
    img = img + rng.normal(0.0, PIXEL_NOISE, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def build_pyramid(base: np.ndarray) -> list:
    levels = [base]
    for _ in range(N_LEVELS - 1):
        levels.append(box_downsample(levels[-1]))
    return levels[::-1]


def generate_slide(seed: int, index: int, size: int = 2048) -> SyntheticSlide:
    if size < 1024 or size % 64:
        raise ValueError(f"slide size must be a multiple of 64 and at least 1024, got {size}")
    rng = stream(seed, "data", index)
    labels = make_label_map(rng, size)
    base = render(rng, labels)
    return SyntheticSlide(f"slide{index:03d}", seed, labels, build_pyramid(base))


def generate_slides(n_slides: int, size: int = 2048, seed: int = 0) -> list:
    """``n_slides`` slides; slide ``i`` depends only on ``(seed, i)``."""
    return [generate_slide(seed, i, size) for i in range(n_slides)]


def uniform_slide(label: int, size: int = 1024, seed: int = 0, slide_id: str = "uniform") -> SyntheticSlide:
    """Single-class slide, for segmentation and labelling checks."""
    rng = stream(seed, "data", 10_000 + label)
    labels = np.full((size, size), label, dtype=np.uint8)
    base = render(rng, labels)
    return SyntheticSlide(slide_id, seed, labels, build_pyramid(base))


def class_fractions(slides) -> np.ndarray:
    counts = np.zeros(len(CLASS_NAMES))
    for s in slides:
        counts += np.bincount(s.label_map.reshape(-1), minlength=len(CLASS_NAMES))
    return counts / counts.sum()
