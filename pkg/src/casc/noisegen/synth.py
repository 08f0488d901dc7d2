"""Synthetic stained patches with elliptical cells and PAS-bright decoys.

Images are composed in stain-concentration space and converted to RGB
through the optical-density model, so the PAS channel recovered by color
deconvolution lights up both cells and decoys. Only cells are annotated;
decoys are what FP injection later picks up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .. import splits
from ..seeds import sub_seed
from . import stain

CLASS_NAMES = ("Pod", "Mes", "Endo", "Pecs")

# per-class (semi-axis a range, semi-axis b range) in pixels at 64x64
_CLASS_SHAPES = {
    "Pod": ((4.0, 5.5), (3.5, 5.0)),
    "Mes": ((3.0, 4.5), (3.0, 4.5)),
    "Endo": ((4.5, 6.5), (2.5, 3.5)),
    "Pecs": ((5.0, 7.0), (2.5, 3.0)),
}


@dataclass
class SynthParams:
    patch_size: int = 64
    patches_train: int = 60
    patches_val: int = 10
    patches_test: int = 30
    slides: int = 21
    cells_min: int = 3
    cells_max: int = 7
    decoys_min: int = 8
    decoys_max: int = 14
    decoy_radius: tuple[float, float] = (3.0, 5.0)
    gap: int = 2
    class_names: tuple[str, ...] = CLASS_NAMES

    @property
    def patch_total(self) -> int:
        return self.patches_train + self.patches_val + self.patches_test


@dataclass
class SynthPatch:
    patch_id: str
    slide_id: str
    class_name: str
    split: str
    image: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)


def _ellipse(shape, cy, cx, a, b, theta):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    dy, dx = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _place(rng, occupied, size, a, b, gap, tries=200):
    for _ in range(tries):
        theta = rng.uniform(0, np.pi)
        margin = int(np.ceil(max(a, b))) + 1
        if 2 * margin >= size:
            break
        cy = rng.uniform(margin, size - margin)
        cx = rng.uniform(margin, size - margin)
        blob = _ellipse((size, size), cy, cx, a, b, theta)
        if not blob.any():
            continue
        halo = ndimage.binary_dilation(blob, iterations=gap, structure=np.ones((3, 3), bool))
        if not np.any(halo & occupied):
            return blob
    return None


def _smooth_noise(rng, size, sigma, amp):
    n = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma)
    return amp * n / (n.std() + 1e-12)


def render_patch(rng, params: SynthParams, class_name: str, stain_gain=(1.0, 1.0)):
    size = params.patch_size
    if class_name not in _CLASS_SHAPES:
        raise ValueError(f"unknown class {class_name!r}")
    (a_lo, a_hi), (b_lo, b_hi) = _CLASS_SHAPES[class_name]
    occupied = np.zeros((size, size), bool)
    mask = np.zeros((size, size), np.uint8)
    n_cells = int(rng.integers(params.cells_min, params.cells_max + 1))
    for _ in range(n_cells):
        blob = _place(rng, occupied, size, rng.uniform(a_lo, a_hi), rng.uniform(b_lo, b_hi), params.gap)
        if blob is None:
            raise ValueError(f"cannot place {n_cells} cells in a {size}x{size} patch")
        occupied |= blob
        mask[blob] = 1
    decoys = np.zeros((size, size), bool)
    n_decoys = int(rng.integers(params.decoys_min, params.decoys_max + 1))
    for _ in range(n_decoys):
        r = rng.uniform(*params.decoy_radius)
        blob = _place(rng, occupied, size, r, r * rng.uniform(0.7, 1.0), params.gap)
        if blob is None:
            continue  # crowded patch: fewer decoys is fine
        occupied |= blob
        decoys |= blob

    h_gain, p_gain = stain_gain
    conc = np.zeros((size, size, 3))
    conc[..., 0] = 0.08 + _smooth_noise(rng, size, 3.0, 0.03)
    conc[..., 1] = 0.30 + _smooth_noise(rng, size, 4.0, 0.08)
    conc[..., 2] = 0.02
    cells = mask.astype(bool)
    conc[cells, 0] += 0.75 * h_gain
    conc[cells, 1] += 0.15 * p_gain
    conc[decoys, 0] += 0.05
    conc[decoys, 1] += 0.75 * p_gain
    conc += rng.normal(0.0, 0.03, size=conc.shape)
    conc = np.maximum(conc, 0.0)
    image = stain.od_to_rgb(stain.remix(conc))
    return image, mask


def synth_dataset(params: SynthParams | None = None, seed: int = 0) -> list[SynthPatch]:
    """Generate a patch set grouped into synthetic slides.

    Slides are split 6:1:3 with the experiment's split sub-seed, and the
    requested train/val/test patch counts are spread round-robin over the
    slides of each split, so a later :func:`splits.split_slides` with the
    same seed reproduces the requested counts. Classes cycle round-robin.
    """
    p = params or SynthParams()
    if p.patch_size % 4 or p.patch_size < 8:
        raise ValueError("patch size must be a multiple of 4 and at least 8")
    if p.cells_min > p.cells_max or p.cells_min < 0:
        raise ValueError("invalid cell count range")
    if p.patch_total == 0:
        return []
    slide_ids = [f"S{i:03d}" for i in range(p.slides)]
    plan = splits.split_slides(slide_ids, seed=sub_seed(seed, "split"))
    rng = np.random.default_rng(sub_seed(seed, "dataset"))
    gains = {sid: tuple(rng.uniform(0.85, 1.15, size=2)) for sid in slide_ids}

    out = []
    index = 0
    for split, n in zip(splits.SPLITS, (p.patches_train, p.patches_val, p.patches_test)):
        members = plan.slides(split)
        if n and not members:
            raise ValueError(f"no slides assigned to {split} but {n} patches requested")
        for j in range(n):
            sid = members[j % len(members)]
            cls = p.class_names[index % len(p.class_names)]
            image, mask = render_patch(rng, p, cls, gains[sid])
            out.append(SynthPatch(f"p{index:04d}", sid, cls, split, image, mask))
            index += 1
    return out
