"""On-disk dataset layout.

::

    DIR/manifest.csv     slide_id,image_path,mask_path,class_name
    DIR/images/*.png     8-bit RGB
    DIR/masks_clean/*.png  {0,255}
    DIR/masks_noisy/*.png  written by ``inject``
    DIR/config.txt       configuration used to build the dataset
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .trainer import Sample

MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ("slide_id", "image_path", "mask_path", "class_name")
NOISY_DIR = "masks_noisy"


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRow:
    slide_id: str
    image_path: str
    mask_path: str
    class_name: str

    @property
    def image_id(self) -> str:
        return Path(self.image_path).stem


def read_manifest(data_dir) -> list[ManifestRow]:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise ManifestError(f"no manifest at {path}")
    rows = io.read_csv(path)
    if rows and tuple(rows[0].keys()) != MANIFEST_COLUMNS:
        raise ManifestError(f"manifest columns must be {MANIFEST_COLUMNS}")
    return [ManifestRow(**r) for r in rows]


def noisy_path(data_dir, row: ManifestRow) -> Path:
    return Path(data_dir) / NOISY_DIR / Path(row.mask_path).name


def validate(data_dir, rows, cfg: ExperimentConfig) -> list[str]:
    """Problems found in the manifest, one message per offending row."""
    problems = []
    for i, r in enumerate(rows):
        where = f"row {i + 1} ({r.image_id})"
        if not r.slide_id:
            problems.append(f"{where}: empty slide_id")
        if r.class_name not in cfg.class_names:
            problems.append(f"{where}: class {r.class_name!r} not in {cfg.class_names}")
        img_p, mask_p = Path(data_dir) / r.image_path, Path(data_dir) / r.mask_path
        if not img_p.exists():
            problems.append(f"{where}: missing image {r.image_path}")
        if not mask_p.exists():
            problems.append(f"{where}: missing mask {r.mask_path}")
        if img_p.exists() and mask_p.exists():
            shape_i = io.read_image(img_p).shape[:2]
            shape_m = io.read_mask(mask_p).shape
            if shape_i != shape_m:
                problems.append(f"{where}: mask size {shape_m} differs from image size {shape_i}")
    return problems


def load_samples(data_dir, cfg: ExperimentConfig, strict: bool = True):
    """Read every manifest row into a :class:`Sample`.

    With ``strict`` any manifest problem raises; otherwise rows with a
    missing clean mask are returned separately as ``(row, message)`` pairs.
    """
    rows = read_manifest(data_dir)
    problems = validate(data_dir, rows, cfg)
    if strict and problems:
        raise ManifestError("manifest problems:\n  " + "\n  ".join(problems))
    samples, skipped = [], []
    for r in rows:
        img_p, mask_p = Path(data_dir) / r.image_path, Path(data_dir) / r.mask_path
        if not img_p.exists():
            raise ManifestError(f"missing image {r.image_path}")
        if not mask_p.exists():
            skipped.append((r, f"missing mask {r.mask_path}"))
            continue
        npath = noisy_path(data_dir, r)
        samples.append(Sample(
            patch_id=r.image_id,
            slide_id=r.slide_id,
            class_name=r.class_name,
            class_index=cfg.class_names.index(r.class_name),
            image=io.read_image(img_p),
            clean=io.read_mask(mask_p),
            noisy=io.read_mask(npath) if npath.exists() else None,
        ))
    return samples, skipped


def has_noisy(samples) -> bool:
    return any(s.noisy is not None for s in samples)


def mask_equal(a, b) -> bool:
    return np.array_equal(np.asarray(a) > 0, np.asarray(b) > 0)
