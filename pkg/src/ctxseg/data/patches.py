"""Co-centred patch groups: extraction, augmentation, corruption, batching."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .synthetic import LEVEL_FACTOR, N_LEVELS, SyntheticSlide

PATCH = 64
HIRES_PATCH = 512
# field of view of the widest (scale 0) patch, in base pixels
MAX_FOV = PATCH * LEVEL_FACTOR[0]
LABEL_WINDOW = 32
NOISE_MEAN = 127.0
NOISE_STD = 1.0


@dataclass
class PatchGroup:
    slide_id: str
    center: tuple  # (cx, cy) in base pixels
    scales: np.ndarray  # (4, 64, 64, 3) uint8, index 0 = lowest magnification
    label: int
    hires: np.ndarray | None = None  # (512, 512, 3) uint8
    purity: float = 1.0
    transform: int = 0  # dihedral index applied by augment
    replaced: tuple = (False, False, False, False)


@dataclass
class PatchSet:
    """Column-oriented collection of groups, the unit training works on."""

    scales: np.ndarray  # (M, 4, 64, 64, 3) uint8
    labels: np.ndarray  # (M,) int64
    slide_ids: np.ndarray  # (M,) str
    centers: np.ndarray  # (M, 2) int64
    hires: np.ndarray | None = None  # (M, 512, 512, 3) uint8 or None
    class_names: tuple = field(default=("lumen", "stroma", "benign", "tumour"))

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PatchSet(
            self.scales[idx],
            self.labels[idx],
            self.slide_ids[idx],
            self.centers[idx],
            None if self.hires is None else self.hires[idx],
            self.class_names,
        )

    def group(self, i: int) -> PatchGroup:
        return PatchGroup(
            str(self.slide_ids[i]),
            tuple(int(v) for v in self.centers[i]),
            self.scales[i],
            int(self.labels[i]),
            None if self.hires is None else self.hires[i],
        )

    @classmethod
    def from_groups(cls, groups: Sequence[PatchGroup], class_names=None) -> "PatchSet":
        names = tuple(class_names) if class_names else ("lumen", "stroma", "benign", "tumour")
        if not groups:
            return cls(
                np.zeros((0, N_LEVELS, PATCH, PATCH, 3), np.uint8),
                np.zeros(0, np.int64),
                np.zeros(0, dtype="<U1"),
                np.zeros((0, 2), np.int64),
                None,
                names,
            )
        hires = None
        if all(g.hires is not None for g in groups):
            hires = np.stack([g.hires for g in groups])
        return cls(
            np.stack([g.scales for g in groups]),
            np.array([g.label for g in groups], dtype=np.int64),
            np.array([g.slide_id for g in groups]),
            np.array([g.center for g in groups], dtype=np.int64),
            hires,
            names,
        )

    @classmethod
    def concat(cls, sets: Sequence["PatchSet"]) -> "PatchSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.from_groups([])
        hires = None
        if all(s.hires is not None for s in sets):
            hires = np.concatenate([s.hires for s in sets])
        return cls(
            np.concatenate([s.scales for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.slide_ids for s in sets]),
            np.concatenate([s.centers for s in sets]),
            hires,
            sets[0].class_names,
        )


def _window(img: np.ndarray, cy: int, cx: int, half: int) -> np.ndarray:
    return img[cy - half : cy + half, cx - half : cx + half]


def group_at(slide: SyntheticSlide, cx: int, cy: int, hires: bool = True) -> PatchGroup:
    """Patches of every magnification centred on base pixel (cx, cy)."""
    if cx % LEVEL_FACTOR[0] or cy % LEVEL_FACTOR[0]:
        raise ValueError(f"centre ({cx}, {cy}) must be a multiple of {LEVEL_FACTOR[0]} for exact alignment")
    half = MAX_FOV // 2
    if not (half <= cx <= slide.size - half and half <= cy <= slide.size - half):
        raise ValueError(f"centre ({cx}, {cy}) leaves the {MAX_FOV}px field of view outside the slide")
    scales = np.stack(
        [
            _window(slide.levels[k], cy // LEVEL_FACTOR[k], cx // LEVEL_FACTOR[k], PATCH // 2)
            for k in range(N_LEVELS)
        ]
    )
    win = _window(slide.label_map, cy, cx, LABEL_WINDOW // 2)
    counts = np.bincount(win.reshape(-1), minlength=4)
    label = int(np.argmax(counts))
    purity = counts[label] / win.size
    hi = _window(slide.base, cy, cx, HIRES_PATCH // 2).copy() if hires else None
    return PatchGroup(slide.slide_id, (cx, cy), scales.copy(), label, hi, float(purity))


def grid_centres(size: int, stride: int) -> list:
    """Centres on a ``stride`` grid (snapped to multiples of 8) whose widest field fits."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    half = MAX_FOV // 2
    if size < MAX_FOV:
        raise ValueError(f"slide of {size}px is smaller than the {MAX_FOV}px field of view")
    step = LEVEL_FACTOR[0]
    coords = sorted({half + ((v // step) * step) for v in range(0, size - MAX_FOV + 1, stride)})
    return [(cx, cy) for cy in coords for cx in coords]


def extract_patches(
    slide: SyntheticSlide, stride: int, min_purity: float = 0.75, hires: bool = True
) -> list:
    """Grid-sample groups; labels come from the central 32x32 base window."""
    groups = []
    for cx, cy in grid_centres(slide.size, stride):
        g = group_at(slide, cx, cy, hires=hires)
        if g.purity >= min_purity:
            groups.append(g)
    return groups


def extract_patchset(slides, stride: int, min_purity: float = 0.75, hires: bool = False) -> PatchSet:
    return PatchSet.concat(
        [PatchSet.from_groups(extract_patches(s, stride, min_purity, hires)) for s in slides]
    )


# ------------------------------------------------------------ augmentation


def dihedral(img: np.ndarray, t: int) -> np.ndarray:
    """Transform ``t`` of the 8-element dihedral group on the (H, W) axes of (..., H, W, C)."""
    if not 0 <= t < 8:
        raise ValueError(f"dihedral index must lie in [0, 8), got {t}")
    out = np.rot90(img, k=t % 4, axes=(-3, -2))
    if t >= 4:
        out = out[..., :, ::-1, :]
    return np.ascontiguousarray(out)


def augment(group: PatchGroup, rng: np.random.Generator, t: int | None = None) -> PatchGroup:
    """Apply one dihedral transform, the same one to every magnification."""
    if t is None:
        t = int(rng.integers(0, 8))
    scales = np.stack([dihedral(s, t) for s in group.scales])
    hires = None if group.hires is None else dihedral(group.hires, t)
    return replace(group, scales=scales, hires=hires, transform=t)


def augment_batch(scales: np.ndarray, rng: np.random.Generator) -> tuple:
    """Per-sample dihedral transforms on (N, 4, H, W, 3); returns (arrays, indices)."""
    ts = rng.integers(0, 8, size=len(scales))
    out = np.empty_like(scales)
    for t in range(8):
        sel = np.flatnonzero(ts == t)
        if sel.size:
            out[sel] = dihedral(scales[sel], t)
    return out, ts


# --------------------------------------------------------------- corruption


def noise_image(rng: np.random.Generator, shape) -> np.ndarray:
    return np.clip(np.round(rng.normal(NOISE_MEAN, NOISE_STD, size=shape)), 0, 255).astype(np.uint8)


def corrupt_scales(group: PatchGroup, p: float, rng: np.random.Generator) -> PatchGroup:
    """Independently per magnification, replace the patch by N(127, 1) noise with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"corruption probability must lie in [0, 1], got {p}")
    hit = rng.random(len(group.scales)) < p
    scales = group.scales.copy()
    for k in np.flatnonzero(hit):
        scales[k] = noise_image(rng, scales[k].shape)
    return replace(group, scales=scales, replaced=tuple(bool(h) for h in hit))


def corrupt_batch(scales: np.ndarray, p: float, rng: np.random.Generator) -> tuple:
    """Vectorised :func:`corrupt_scales` over (N, 4, H, W, 3); returns (arrays, hit mask)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"corruption probability must lie in [0, 1], got {p}")
    hit = rng.random(scales.shape[:2]) < p
    out = scales.copy()
    n_hit = int(hit.sum())
    if n_hit:
        out[hit] = noise_image(rng, (n_hit,) + scales.shape[2:])
    return out, hit


# ------------------------------------------------------------------ batching


def to_chw(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (..., H, W, 3) -> float (..., 3, H, W) in [0, 1]."""
    dtype = np.dtype(dtype)
    return np.moveaxis(arr, -1, -3).astype(dtype) / dtype.type(255.0)


def make_batch(scales: np.ndarray, hires: np.ndarray | None = None, dtype=np.float32) -> dict:
    """Model input dict keyed by scale index (and ``"hires"``)."""
    batch = {k: to_chw(scales[:, k], dtype) for k in range(scales.shape[1])}
    if hires is not None:
        batch["hires"] = to_chw(hires, dtype)
    return batch
