"""Directory format for patch datasets.

Layout::

    <root>/labels.csv                      header: slide_id,cx,cy,label
    <root>/<slide_id>/<cx>_<cy>/scale0.png ... scale3.png   (64x64 RGB)
    <root>/<slide_id>/<cx>_<cy>/hires.png  (optional, 512x512 RGB)

Scale 0 is the lowest magnification.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .patches import HIRES_PATCH, PATCH, PatchSet
from .synthetic import CLASS_NAMES, N_LEVELS

LABELS_FILE = "labels.csv"
LABELS_HEADER = ("slide_id", "cx", "cy", "label")


class IngestionError(ValueError):
    """The dataset directory is incomplete or malformed; ``paths`` lists the offenders."""

    def __init__(self, message: str, paths=()):
        self.paths = [str(p) for p in paths]
        detail = "".join(f"\n  {p}" for p in self.paths[:20])
        more = f"\n  ... and {len(self.paths) - 20} more" if len(self.paths) > 20 else ""
        super().__init__(message + detail + more)


@dataclass(frozen=True)
class PatchRecord:
    slide_id: str
    directory: Path
    cx: int
    cy: int
    label: int
    has_hires: bool = False

    def scale_path(self, k: int) -> Path:
        return self.directory / f"scale{k}.png"

    @property
    def hires_path(self) -> Path:
        return self.directory / "hires.png"


@dataclass
class DatasetManifest:
    root: Path
    records: list = field(default_factory=list)
    class_names: tuple = CLASS_NAMES

    def __len__(self) -> int:
        return len(self.records)

    @property
    def slide_ids(self) -> list:
        return sorted({r.slide_id for r in self.records})


def _check_image(path: Path, side: int) -> str | None:
    """Header-only validation; returns a reason string on failure."""
    try:
        with Image.open(path) as im:
            if im.size != (side, side):
                return f"expected {side}x{side}, got {im.size[0]}x{im.size[1]}"
            if im.mode != "RGB":
                return f"expected 8-bit RGB, got mode {im.mode}"
    except (OSError, SyntaxError) as exc:
        return f"unreadable image ({exc.__class__.__name__})"
    return None


def ingest(root, class_names=CLASS_NAMES) -> DatasetManifest:
    """Validate ``root`` and index its patch groups; pixels are decoded by :func:`load_patchset`."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError("dataset root is not a directory", [root])
    labels_path = root / LABELS_FILE
    if not labels_path.exists():
        if not any(root.iterdir()):
            warnings.warn(f"dataset root {root} is empty; returning an empty manifest", stacklevel=2)
            return DatasetManifest(root, [], tuple(class_names))
        raise IngestionError("missing label table", [labels_path])
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(h.strip() for h in next(reader, ()))
        if header != LABELS_HEADER:
            raise IngestionError(f"labels.csv header must be {','.join(LABELS_HEADER)}", [labels_path])
        rows = [r for r in reader if r]
    if not rows:
        warnings.warn(f"dataset {root} lists no patch groups", stacklevel=2)
    records, missing, unreadable, bad_label = [], [], [], []
    for line, row in enumerate(rows, start=2):
        if len(row) != 4:
            raise IngestionError(f"labels.csv line {line}: expected 4 fields, got {len(row)}", [labels_path])
        slide_id, cx, cy, label = (v.strip() for v in row)
        try:
            cx_i, cy_i, lab = int(cx), int(cy), int(label)
        except ValueError:
            raise IngestionError(f"labels.csv line {line}: non-integer field", [labels_path]) from None
        directory = root / slide_id / f"{cx_i}_{cy_i}"
        if not 0 <= lab < len(class_names):
            bad_label.append(f"{directory} (label {lab})")
        for k in range(N_LEVELS):
            p = directory / f"scale{k}.png"
            if not p.exists():
                missing.append(p)
            else:
                why = _check_image(p, PATCH)
                if why:
                    unreadable.append(f"{p}: {why}")
        hires = directory / "hires.png"
        has_hires = hires.exists()
        if has_hires:
            why = _check_image(hires, HIRES_PATCH)
            if why:
                unreadable.append(f"{hires}: {why}")
        records.append(PatchRecord(slide_id, directory, cx_i, cy_i, lab, has_hires))
    if missing:
        raise IngestionError("missing scale images", missing)
    if unreadable:
        raise IngestionError("unreadable images", unreadable)
    if bad_label:
        raise IngestionError(f"labels outside the class table 0..{len(class_names) - 1}", bad_label)
    return DatasetManifest(root, records, tuple(class_names))


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_patchset(manifest: DatasetManifest, hires: bool | None = None) -> PatchSet:
    """Decode every record; ``hires=None`` loads high-resolution patches when all records have one."""
    recs = manifest.records
    if hires is None:
        hires = bool(recs) and all(r.has_hires for r in recs)
    if hires and not all(r.has_hires for r in recs):
        raise IngestionError("high-resolution patches requested but missing", [r.hires_path for r in recs if not r.has_hires])
    scales = np.empty((len(recs), N_LEVELS, PATCH, PATCH, 3), dtype=np.uint8)
    hi = np.empty((len(recs), HIRES_PATCH, HIRES_PATCH, 3), dtype=np.uint8) if hires else None
    for n, r in enumerate(recs):
        for k in range(N_LEVELS):
            scales[n, k] = _read_rgb(r.scale_path(k))
        if hires:
            hi[n] = _read_rgb(r.hires_path)
    return PatchSet(
        scales,
        np.array([r.label for r in recs], dtype=np.int64),
        np.array([r.slide_id for r in recs]) if recs else np.zeros(0, dtype="<U1"),
        np.array([(r.cx, r.cy) for r in recs], dtype=np.int64).reshape(-1, 2),
        hi,
        manifest.class_names,
    )


def _write_png(path: Path, arr: np.ndarray) -> None:
    # PIL's PNG encoder writes no timestamps, so equal pixels give equal bytes
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG", compress_level=6)


def write_dataset(ps: PatchSet, root, include_hires: bool = False) -> Path:
    """Write ``ps`` in the directory layout above; returns the label table path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if include_hires and ps.hires is None:
        raise ValueError("patch set carries no high-resolution patches")
    rows = []
    for n in range(len(ps)):
        sid = str(ps.slide_ids[n])
        cx, cy = (int(v) for v in ps.centers[n])
        d = root / sid / f"{cx}_{cy}"
        d.mkdir(parents=True, exist_ok=True)
        for k in range(ps.scales.shape[1]):
            _write_png(d / f"scale{k}.png", ps.scales[n, k])
        if include_hires:
            _write_png(d / "hires.png", ps.hires[n])
        rows.append((sid, cx, cy, int(ps.labels[n])))
    labels = root / LABELS_FILE
    with open(labels, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABELS_HEADER)
        w.writerows(rows)
    return labels
