"""Synthetic slides, aligned patch groups, and the on-disk dataset format."""

from .ingest import DatasetManifest, IngestionError, PatchRecord, ingest, load_patchset, write_dataset
from .patches import (
    PatchGroup,
    PatchSet,
    augment,
    augment_batch,
    corrupt_batch,
    corrupt_scales,
    dihedral,
    extract_patches,
    extract_patchset,
    group_at,
    make_batch,
)
from .synthetic import CLASS_NAMES, SyntheticSlide, generate_slide, generate_slides, uniform_slide

__all__ = [
    "CLASS_NAMES",
    "DatasetManifest",
    "IngestionError",
    "PatchGroup",
    "PatchRecord",
    "PatchSet",
    "SyntheticSlide",
    "augment",
    "augment_batch",
    "corrupt_batch",
    "corrupt_scales",
    "dihedral",
    "extract_patches",
    "extract_patchset",
    "generate_slide",
    "generate_slides",
    "group_at",
    "ingest",
    "load_patchset",
    "make_batch",
    "uniform_slide",
    "write_dataset",
]
