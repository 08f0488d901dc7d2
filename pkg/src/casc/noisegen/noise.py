"""False-positive injection and false-negative removal for binary masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import stain
from .contours import Contour, draw_contours, extract_contours, fill_contour
from .rng import shuffle


@dataclass
class NoiseRecipe:
    """Parameters of the two noise generators.

    ``T`` thresholds the 8-bit PAS-analog channel; ``rho_fp`` sets the
    injection limit as a fraction of the annotated cell count; candidate
    areas outside ``[a_min, a_max]`` pixels are rejected.
    """

    T: int = 70
    rho_fp: float = 0.5
    missing_ratio: float = 0.3
    a_min: int = 30
    a_max: int = 1500
    seed: int = 0
    stain_matrix: np.ndarray | None = field(default=None, repr=False)
    pas_channel: int = stain.PAS_CHANNEL

    def __post_init__(self):
        if not 0.0 <= self.missing_ratio <= 1.0:
            raise ValueError(f"missing_ratio must lie in [0, 1], got {self.missing_ratio}")
        if self.a_min > self.a_max:
            raise ValueError(f"a_min={self.a_min} exceeds a_max={self.a_max}")
        if not 0 <= self.T <= 255:
            raise ValueError(f"T must lie in [0, 255], got {self.T}")
        if self.rho_fp < 0:
            raise ValueError("rho_fp must be non-negative")


@dataclass
class ContourEvent:
    contour_index: int
    action: str  # "add" | "remove"
    area: int
    centroid: tuple[float, float]


@dataclass
class NoiseResult:
    mask: np.ndarray
    events: list[ContourEvent]
    limit: int
    warning: str | None = None


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def keep_count(n: int, missing_ratio: float) -> int:
    """``floor((1 - missing_ratio) * n)``, guarded against float round-off."""
    return int(math.floor((1.0 - missing_ratio) * n + 1e-9))


def pas_candidates(image, recipe: NoiseRecipe) -> list[Contour]:
    conc = stain.color_deconvolve(image, recipe.stain_matrix)[..., recipe.pas_channel]
    return extract_contours(stain.threshold_mask(stain.to_8bit(conc), recipe.T))


def _distance_to_mask(points_xy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return np.full(len(points_xy), np.inf)
    d2 = (points_xy[:, :1] - xs[None, :]) ** 2 + (points_xy[:, 1:] - ys[None, :]) ** 2
    return np.sqrt(d2.min(axis=1))


def inject_fp(image, label, recipe: NoiseRecipe | None = None) -> NoiseResult:
    """Add plausible false-positive cells to ``label``.

    Candidates come from thresholding the PAS-analog stain channel. They are
    visited nearest-first (centroid to closest annotated pixel); a candidate
    is skipped if it overlaps the label or an already added contour, or if
    its area is outside ``[a_min, a_max]``. At most
    ``round(rho_fp * n_cells)`` contours are added.
    """
    recipe = recipe or NoiseRecipe()
    y = (np.asarray(label) > 0).astype(np.uint8)
    if np.asarray(image).shape[:2] != y.shape:
        raise ValueError(f"image {np.asarray(image).shape[:2]} and label {y.shape} differ in size")
    n_cells = len(extract_contours(y))
    limit = round_half_up(recipe.rho_fp * n_cells)
    if n_cells == 0:
        return NoiseResult(mask=y.copy(), events=[], limit=0, warning="empty label")

    candidates = pas_candidates(image, recipe)
    if not candidates or limit == 0:
        return NoiseResult(mask=y.copy(), events=[], limit=limit)
    centroids = np.array([c.centroid for c in candidates])
    dist = _distance_to_mask(centroids, y)
    order = np.argsort(dist, kind="stable")

    occupied = y.astype(bool)
    events = []
    for idx in order:
        cand = candidates[idx]
        region = fill_contour(cand, y.shape).astype(bool)
        if np.any(region & occupied):
            continue
        if not recipe.a_min <= cand.area <= recipe.a_max:
            continue
        occupied |= region
        events.append(ContourEvent(int(idx), "add", cand.area, cand.centroid))
        if len(events) >= limit:
            break
    return NoiseResult(mask=occupied.astype(np.uint8), events=events, limit=limit)


def remove_fn(mask, missing_ratio: float, seed: int) -> NoiseResult:
    """Drop a seeded random ``missing_ratio`` share of the mask's components.

    Contours are shuffled and the first ``floor((1 - r) * n)`` are redrawn
    filled into an empty mask.
    """
    if not 0.0 <= missing_ratio <= 1.0:
        raise ValueError(f"missing_ratio must lie in [0, 1], got {missing_ratio}")
    m = (np.asarray(mask) > 0).astype(np.uint8)
    contours = extract_contours(m)
    order = shuffle(list(range(len(contours))), seed)
    limit = keep_count(len(contours), missing_ratio)
    kept = order[:limit]
    out = draw_contours([contours[i] for i in kept], m.shape)
    events = [
        ContourEvent(i, "remove", contours[i].area, contours[i].centroid)
        for i in sorted(order[limit:])
    ]
    return NoiseResult(mask=out, events=events, limit=limit)


def image_seed(seed: int, index: int) -> int:
    return (seed + index) & ((1 << 64) - 1)


def corrupt(image, clean, recipe: NoiseRecipe, seed: int) -> NoiseResult:
    """Apply both generators to a clean mask.

    Both run against the clean annotation: removal picks among the true
    cells, injection avoids every true cell (so a removed cell can never be
    re-added as a false positive). The result is the union of the kept
    cells and the injected contours.
    """
    y = (np.asarray(clean) > 0).astype(np.uint8)
    events: list[ContourEvent] = []
    warning = None
    kept = y
    if recipe.missing_ratio > 0:
        fn = remove_fn(y, recipe.missing_ratio, seed)
        kept = fn.mask
        events += fn.events
    added = np.zeros_like(y)
    if recipe.rho_fp > 0:
        fp = inject_fp(image, y, recipe)
        added = fp.mask & (1 - y)
        events = fp.events + events
        warning = fp.warning
    return NoiseResult(mask=(kept | added).astype(np.uint8), events=events, limit=-1, warning=warning)
