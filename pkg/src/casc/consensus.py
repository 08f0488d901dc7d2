"""Consensus Matrix partition and feature distillation.

The confidence map ``c`` and the lay annotation ``y`` split a patch into
four regions (CP, CN, DM, DH). Decoder features at the highest-agreement
pixels are averaged into a cell prototype; features at the strongest
disagreement pixels are pooled, weighted by how *unlike* the cell
prototype they are, into a noise prototype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import EPS_NORM, cosine_map, top_k_indices

DEFAULT_TAU = 0.5


@dataclass(frozen=True)
class ConsensusPartition:
    cp: np.ndarray
    cn: np.ndarray
    dm: np.ndarray
    dh: np.ndarray


@dataclass
class DistilledFeatures:
    f_cell: np.ndarray
    f_noise: np.ndarray
    cell_indices: np.ndarray
    noise_indices: np.ndarray
    noise_weights: np.ndarray
    s_cell: np.ndarray


class NoConsensus(Exception):
    """Raised when no pixel is both annotated and predicted (max a_CP == 0)."""


def _check_pair(c, y):
    c = np.asarray(c, dtype=np.float64)
    y = np.asarray(y)
    if c.shape != y.shape:
        raise ValueError(f"shape mismatch: c {c.shape} vs y_l {y.shape}")
    return c, y.astype(np.float64)


def consensus_partition(c, y_l, tau: float = DEFAULT_TAU) -> ConsensusPartition:
    c, y = _check_pair(c, y_l)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    ai = c >= tau
    human = y == 1
    return ConsensusPartition(
        cp=ai & human,
        cn=~ai & ~human,
        dm=ai & ~human,
        dh=~ai & human,
    )


def _gather(f_D: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Rows ``f_D[:, idx]`` as a ``(len(idx), Ch)`` array."""
    ch = f_D.shape[0]
    return f_D.reshape(ch, -1)[:, idx].T


def distill_cell_feature(f_D, c, y_l, k: int):
    """Mean decoder feature at the ``k`` pixels with the largest ``c * y_l``.

    Returns ``(f_cell, ind_cp)``. Raises :class:`NoConsensus` when the
    agreement score is identically zero.
    """
    f_D = np.asarray(f_D, dtype=np.float64)
    c, y = _check_pair(c, y_l)
    if f_D.shape[1:] != c.shape:
        raise ValueError(f"feature map {f_D.shape} does not match grid {c.shape}")
    a_cp = c * y
    ind = top_k_indices(a_cp, k)
    if a_cp.max() <= 0.0:
        raise NoConsensus("no-consensus")
    return _gather(f_D, ind).mean(axis=0), ind


def disagreement_indices(c, y_l, k: int):
    """Top ``k/2`` pixels of the DM score ``c(1-y)`` and the DH score ``(1-c)y``."""
    c, y = _check_pair(c, y_l)
    if k % 2:
        raise ValueError("k must be even")
    if not 2 <= k <= c.size:
        raise ValueError(f"k={k} out of range [2, {c.size}]")
    ind_dm = top_k_indices(c * (1.0 - y), k // 2)
    ind_dh = top_k_indices((1.0 - c) * y, k // 2)
    return ind_dm, ind_dh


def _minmax(s: np.ndarray) -> np.ndarray:
    lo, hi = s.min(), s.max()
    if hi - lo < EPS_NORM:
        return np.full_like(s, 0.5)
    return (s - lo) / (hi - lo)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _cosine_rows(rows: np.ndarray, v: np.ndarray) -> np.ndarray:
    nr = np.linalg.norm(rows, axis=1)
    nv = np.linalg.norm(v)
    out = np.zeros(len(rows))
    ok = (nr >= EPS_NORM) & (nv >= EPS_NORM)
    out[ok] = rows[ok] @ v / (nr[ok] * nv)
    return out


def distill_noise_feature(f_D, ind_dm, ind_dh, f_cell):
    """Pool disagreement features into ``f_noise``.

    Candidates dissimilar to ``f_cell`` receive larger weights:
    ``w = softmax(1 - minmax(cos(fm_noise, f_cell)))``.
    Returns ``(f_noise, w, s_cell)``.
    """
    f_D = np.asarray(f_D, dtype=np.float64)
    f_cell = np.asarray(f_cell, dtype=np.float64)
    idx = np.concatenate([np.asarray(ind_dm), np.asarray(ind_dh)]).astype(np.int64)
    if len(ind_dm) == 0 or len(ind_dh) == 0:
        raise ValueError("empty index list")
    if f_cell.shape != (f_D.shape[0],):
        raise ValueError(f"f_cell has {f_cell.shape}, expected ({f_D.shape[0]},)")
    fm = _gather(f_D, idx)
    s = _cosine_rows(fm, f_cell)
    w = _softmax(1.0 - _minmax(s))
    return w @ fm, w, s


def distill_noise_backward(fm, f_cell, w, s, grad_f_noise):
    """Backprop ``dL/df_noise`` to ``(dL/dfm, dL/df_cell)``.

    ``fm`` holds the gathered candidate rows ``(k, Ch)``.
    """
    g = np.asarray(grad_f_noise, dtype=np.float64)
    d_fm = np.outer(w, g)
    d_w = fm @ g
    d_z = w * (d_w - w @ d_w)
    d_n = -d_z

    d_s = np.zeros_like(s)
    lo_i, hi_i = int(np.argmin(s)), int(np.argmax(s))
    lo, hi = s[lo_i], s[hi_i]
    r = hi - lo
    if r >= EPS_NORM:
        d_s += d_n / r
        d_s[lo_i] += np.sum(d_n * (s - hi)) / r**2
        d_s[hi_i] += np.sum(d_n * -(s - lo)) / r**2

    nv = np.linalg.norm(f_cell)
    nr = np.linalg.norm(fm, axis=1)
    ok = (nr >= EPS_NORM) & (nv >= EPS_NORM)
    d_s = np.where(ok, d_s, 0.0)
    nr_safe = np.where(ok, nr, 1.0)
    inv = d_s / (nr_safe * max(nv, EPS_NORM))
    d_fm += np.outer(inv, f_cell) - (d_s * s / nr_safe**2)[:, None] * fm
    d_cell = inv @ fm - np.sum(d_s * s) * f_cell / max(nv, EPS_NORM) ** 2
    return d_fm, d_cell


def similarity_maps(f_D, f_cell, f_noise):
    """Per-pixel cosine of ``f_D`` against the cell and noise prototypes."""
    return cosine_map(f_D, f_cell), cosine_map(f_D, f_noise)


def distill(f_D, c, y_l, k: int) -> DistilledFeatures:
    """Run cell and noise distillation for one sample."""
    f_cell, ind_cp = distill_cell_feature(f_D, c, y_l, k)
    ind_dm, ind_dh = disagreement_indices(c, y_l, k)
    # a_DM and a_DH have disjoint supports for binary y_l; a pixel can only
    # appear in both lists as zero-score tie fill
    shared = np.intersect1d(ind_dm, ind_dh)
    if shared.size:
        cf = np.asarray(c, dtype=np.float64).ravel()[shared]
        yf = np.asarray(y_l, dtype=np.float64).ravel()[shared]
        assert np.all(cf * (1 - yf) * (1 - cf) * yf == 0), "overlapping disagreement scores"
    f_noise, w, s = distill_noise_feature(f_D, ind_dm, ind_dh, f_cell)
    return DistilledFeatures(
        f_cell=f_cell,
        f_noise=f_noise,
        cell_indices=ind_cp,
        noise_indices=np.concatenate([ind_dm, ind_dh]),
        noise_weights=w,
        s_cell=s,
    )

