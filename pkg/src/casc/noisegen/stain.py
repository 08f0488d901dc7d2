"""Optical-density color deconvolution."""

from __future__ import annotations

import numpy as np

# Rows are unit stain vectors in RGB optical-density space:
# hematoxylin, PAS (magenta), and a residual orthogonal to both.
_HEMATOXYLIN = np.array([0.644211, 0.716556, 0.266844])
_PAS = np.array([0.175411, 0.972178, 0.154589])


def _default_matrix() -> np.ndarray:
    h = _HEMATOXYLIN / np.linalg.norm(_HEMATOXYLIN)
    p = _PAS / np.linalg.norm(_PAS)
    r = np.cross(h, p)
    return np.stack([h, p, r / np.linalg.norm(r)])


HPAS_MATRIX = _default_matrix()
PAS_CHANNEL = 1
OD_MAX = np.log10(256.0)


def optical_density(image) -> np.ndarray:
    """``-log10((I + 1) / 256)`` per channel; 0 for white, finite for black."""
    return -np.log10((np.asarray(image, dtype=np.float64) + 1.0) / 256.0)


def color_deconvolve(image, stain_matrix=None, clamp: bool = True) -> np.ndarray:
    """Stain concentrations ``(H, W, 3)`` of an RGB uint8 image.

    ``OD = C @ M`` with stain vectors as the rows of ``M``, hence
    ``C = OD @ inv(M)``. Negative concentrations are clipped to zero unless
    ``clamp`` is off.
    """
    m = HPAS_MATRIX if stain_matrix is None else np.asarray(stain_matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError("stain matrix must be 3x3")
    if abs(np.linalg.det(m)) < 1e-10:
        raise ValueError("singular stain matrix")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    conc = optical_density(image) @ np.linalg.inv(m)
    return np.maximum(conc, 0.0) if clamp else conc


def remix(concentrations, stain_matrix=None) -> np.ndarray:
    """Optical density from stain concentrations (inverse of deconvolution)."""
    m = HPAS_MATRIX if stain_matrix is None else np.asarray(stain_matrix, dtype=np.float64)
    return np.asarray(concentrations, dtype=np.float64) @ m


def od_to_rgb(od) -> np.ndarray:
    """Inverse of :func:`optical_density`, rounded to uint8."""
    rgb = 256.0 * np.power(10.0, -np.asarray(od, dtype=np.float64)) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def to_8bit(concentration) -> np.ndarray:
    """Map a concentration channel onto 0..255 (``OD_MAX`` maps to 255)."""
    return np.clip(np.rint(np.asarray(concentration) * (255.0 / OD_MAX)), 0, 255).astype(np.uint8)


def threshold_mask(channel, T) -> np.ndarray:
    return (np.asarray(channel) >= T).astype(np.uint8)
