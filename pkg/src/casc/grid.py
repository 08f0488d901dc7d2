"""Shared 2-D grid primitives.

Grids are plain ``numpy`` arrays: a pixel grid is ``(H, W)`` float64, a
feature map is ``(Ch, H, W)``, logits are ``(2, H, W)`` with background in
channel 0. Flattened pixel indices are row-major (``y * W + x``) everywhere.
"""

from __future__ import annotations

import numpy as np

EPS_NORM = 1e-12


def softmax_foreground(logits: np.ndarray) -> np.ndarray:
    """Foreground probability of a 2-channel logit field."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[0] != 2:
        raise ValueError(f"logits must have shape (2, H, W), got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("invalid logits")
    m = logits.max(axis=0)
    e = np.exp(logits - m)
    c = e[1] / (e[0] + e[1])
    # keep strictly inside (0, 1) even when one logit dominates
    tiny = np.finfo(np.float64).tiny
    return np.clip(c, tiny, 1.0 - np.finfo(np.float64).epsneg)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.size} vs {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < EPS_NORM or nv < EPS_NORM:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_map(fmap: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-pixel cosine between ``fmap[:, y, x]`` and ``v``; degenerate norms give 0."""
    fmap = np.asarray(fmap, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if fmap.ndim != 3 or v.ndim != 1 or fmap.shape[0] != v.shape[0]:
        raise ValueError(f"channel mismatch: map {fmap.shape} vs vector {v.shape}")
    nv = np.linalg.norm(v)
    nf = np.sqrt(np.einsum("chw,chw->hw", fmap, fmap))
    dot = np.einsum("chw,c->hw", fmap, v)
    ok = (nf >= EPS_NORM) & (nv >= EPS_NORM)
    out = np.zeros(fmap.shape[1:])
    out[ok] = dot[ok] / (nf[ok] * nv)
    return np.clip(out, -1.0, 1.0)


def top_k_indices(grid: np.ndarray, k: int) -> np.ndarray:
    """Flattened indices of the ``k`` largest values.

    Ties are broken by ascending flattened index, so the result is fully
    deterministic.
    """
    flat = np.asarray(grid, dtype=np.float64).ravel()
    if not 1 <= k <= flat.size:
        raise ValueError(f"k={k} out of range [1, {flat.size}]")
    # stable sort on the negated score keeps equal scores in index order
    return np.argsort(-flat, kind="stable")[:k]


def default_k(height: int, width: int) -> int:
    k = max(16, round(0.01 * height * width))
    k += k % 2
    return min(k, height * width - (height * width) % 2)
