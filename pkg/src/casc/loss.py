"""Consensus-aware supervised loss, contrastive separation and their sum.

Every loss comes with an analytic gradient. The weight maps ``omega_c`` and
``omega_sim`` are stop-gradient multipliers and the top-k index lists are
constants of the step, so the gradient of :func:`total_loss` flows through
``c`` (hence the logits), ``f_cell`` and ``f_noise`` only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import consensus
from .grid import default_k, softmax_foreground

EPS_P = 1e-7
EPS_D = 1.0
KL_FLOOR = 1e-12
DEFAULT_MARGIN = 1.0
DEFAULT_LAMBDA = 1.0
CONTRASTIVE_MODES = ("separative", "literal")


def _same_shape(*grids):
    shape = np.shape(grids[0])
    for g in grids[1:]:
        if np.shape(g) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {np.shape(g)}")


def omega_c(c, y_l) -> np.ndarray:
    """``exp(c*y + (1-c)*(1-y))``: large where model and annotation agree."""
    _same_shape(c, y_l)
    c = np.asarray(c, dtype=np.float64)
    y = np.asarray(y_l, dtype=np.float64)
    return np.exp(c * y + (1.0 - c) * (1.0 - y))


def omega_sim(sim_cell, sim_noise) -> np.ndarray:
    _same_shape(sim_cell, sim_noise)
    return np.exp(np.asarray(sim_cell, dtype=np.float64) - np.asarray(sim_noise, dtype=np.float64))


def weighted_bce(c, y_l, weight) -> float:
    _same_shape(c, y_l, weight)
    c = np.clip(np.asarray(c, dtype=np.float64), EPS_P, 1.0 - EPS_P)
    y = np.asarray(y_l, dtype=np.float64)
    per_px = -y * np.log(c) - (1.0 - y) * np.log(1.0 - c)
    return float(np.mean(np.asarray(weight, dtype=np.float64) * per_px))


def weighted_bce_grad(c, y_l, weight) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    y = np.asarray(y_l, dtype=np.float64)
    cc = np.clip(c, EPS_P, 1.0 - EPS_P)
    g = np.asarray(weight, dtype=np.float64) * (-y / cc + (1.0 - y) / (1.0 - cc)) / c.size
    inside = (c > EPS_P) & (c < 1.0 - EPS_P)
    return np.where(inside, g, 0.0)


def weighted_soft_dice(c, y_l, weight) -> float:
    """``1 - (2*sum(w*c*y) + eps) / (sum(w*(c+y)) + eps)`` with ``eps = 1``."""
    _same_shape(c, y_l, weight)
    c = np.asarray(c, dtype=np.float64)
    y = np.asarray(y_l, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    num = 2.0 * np.sum(w * c * y) + EPS_D
    den = np.sum(w * (c + y)) + EPS_D
    return float(1.0 - num / den)


def weighted_soft_dice_grad(c, y_l, weight) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    y = np.asarray(y_l, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    num = 2.0 * np.sum(w * c * y) + EPS_D
    den = np.sum(w * (c + y)) + EPS_D
    return -(2.0 * w * y * den - num * w) / den**2


def supervised_loss(c, y_l, sim_cell=None, sim_noise=None, *, weight=None) -> float:
    """Dice + BCE with per-pixel weight ``omega_c * omega_sim``.

    Passing ``weight`` explicitly bypasses the consensus weights; with
    ``weight = 1`` this is plain Dice + BCE.
    """
    if weight is None:
        if sim_cell is None:
            sim_cell = sim_noise = np.zeros(np.shape(c))
        weight = omega_c(c, y_l) * omega_sim(sim_cell, sim_noise)
    return weighted_soft_dice(c, y_l, weight) + weighted_bce(c, y_l, weight)


def _log_softmax(z):
    z = z - z.max()
    return z - np.log(np.sum(np.exp(z)))


def _divergence(f_cell, f_noise):
    """KL(P||Q) + MSE(P, Q) on channel softmaxes, plus pieces for backward."""
    log_p = _log_softmax(np.asarray(f_cell, dtype=np.float64))
    p = np.exp(log_p)
    q = np.exp(_log_softmax(np.asarray(f_noise, dtype=np.float64)))
    q_floor = np.maximum(q, KL_FLOOR)
    # KL is non-negative; clamp away round-off when P and Q coincide
    kl = max(0.0, float(np.sum(p * (log_p - np.log(q_floor)))))
    mse = float(np.mean((p - q) ** 2))
    return kl + mse, (log_p, p, q, q_floor)


def contrastive_loss(f_cell, f_noise, mode: str = "separative", margin: float = DEFAULT_MARGIN) -> float:
    """Divergence between cell and noise prototypes.

    ``literal`` returns ``D = KL + MSE`` itself; ``separative`` returns the
    hinge ``max(0, margin - D)``, which is minimised by pulling the two
    prototypes apart.
    """
    if np.shape(f_cell) != np.shape(f_noise):
        raise ValueError(f"length mismatch: {np.shape(f_cell)} vs {np.shape(f_noise)}")
    if mode not in CONTRASTIVE_MODES:
        raise ValueError(f"unknown contrastive mode {mode!r}")
    d, _ = _divergence(f_cell, f_noise)
    if mode == "literal":
        return d
    return max(0.0, margin - d)


def contrastive_grad(f_cell, f_noise, mode: str = "separative", margin: float = DEFAULT_MARGIN):
    """Gradient of :func:`contrastive_loss` w.r.t. ``(f_cell, f_noise)``."""
    d, (log_p, p, q, q_floor) = _divergence(f_cell, f_noise)
    if mode == "separative":
        if d >= margin:
            return np.zeros_like(p), np.zeros_like(q)
        sign = -1.0
    else:
        sign = 1.0
    ch = p.size
    d_p = log_p - np.log(q_floor) + 1.0 + 2.0 * (p - q) / ch
    d_q = np.where(q > KL_FLOOR, -p / q_floor, 0.0) - 2.0 * (p - q) / ch
    d_a = p * (d_p - p @ d_p)
    d_b = q * (d_q - q @ d_q)
    return sign * d_a, sign * d_b


@dataclass
class LossBreakdown:
    dice_term: float
    bce_term: float
    supervised: float
    contrastive: float
    total: float
    omega_c: np.ndarray
    omega_sim: np.ndarray
    consensus: bool = True


@dataclass
class Frozen:
    """Step constants: index lists and the detached pixel weight."""

    weight: np.ndarray
    cell_indices: np.ndarray | None = None
    ind_dm: np.ndarray | None = None
    ind_dh: np.ndarray | None = None


@dataclass
class LossSettings:
    k: int | None = None
    lambda_con: float = DEFAULT_LAMBDA
    margin: float = DEFAULT_MARGIN
    contrastive_mode: str = "separative"
    casc: bool = True
    tau: float = consensus.DEFAULT_TAU

    def resolve_k(self, height: int, width: int) -> int:
        return self.k if self.k else default_k(height, width)


@dataclass
class Objective:
    breakdown: LossBreakdown
    grad_p: np.ndarray | None
    grad_f_D: np.ndarray | None
    frozen: Frozen
    distilled: consensus.DistilledFeatures | None = field(default=None, repr=False)
    partition: consensus.ConsensusPartition | None = field(default=None, repr=False)


def _logit_grad(c, d_c):
    g = d_c * c * (1.0 - c)
    return np.stack([-g, g])


def total_loss(p, f_D, y_l, settings: LossSettings | None = None, *, frozen: Frozen | None = None,
               need_grad: bool = True) -> Objective:
    """Full objective for one sample: weighted Dice + BCE + lambda * contrastive.

    ``frozen`` pins the step constants (indices and weight map) so that the
    value can be re-evaluated at perturbed parameters, which is what a
    finite-difference check needs.
    """
    s = settings or LossSettings()
    p = np.asarray(p, dtype=np.float64)
    f_D = np.asarray(f_D, dtype=np.float64)
    y = np.asarray(y_l, dtype=np.float64)
    c = softmax_foreground(p)
    _same_shape(c, y)
    h, w = c.shape
    k = s.resolve_k(h, w)

    distilled = None
    om_c = np.ones_like(c)
    om_s = np.ones_like(c)
    if s.casc:
        om_c = omega_c(c, y)
        if frozen is None:
            try:
                distilled = consensus.distill(f_D, c, y, k)
            except consensus.NoConsensus:
                distilled = None
        elif frozen.cell_indices is not None:
            distilled = _distill_frozen(f_D, frozen)
        if distilled is not None:
            sim_cell, sim_noise = consensus.similarity_maps(f_D, distilled.f_cell, distilled.f_noise)
            om_s = omega_sim(sim_cell, sim_noise)
    if frozen is None:
        # no-consensus samples fall back to plain Dice + BCE
        weight = om_c * om_s if distilled is not None else np.ones_like(c)
        ind_dm = ind_dh = None
        if distilled is not None:
            half = len(distilled.noise_indices) // 2
            ind_dm, ind_dh = distilled.noise_indices[:half], distilled.noise_indices[half:]
        frozen = Frozen(
            weight=weight,
            cell_indices=None if distilled is None else distilled.cell_indices,
            ind_dm=ind_dm,
            ind_dh=ind_dh,
        )
    weight = frozen.weight

    dice = weighted_soft_dice(c, y, weight)
    bce = weighted_bce(c, y, weight)
    sup = dice + bce
    con = 0.0
    if distilled is not None:
        con = contrastive_loss(distilled.f_cell, distilled.f_noise, s.contrastive_mode, s.margin)
    total = sup + s.lambda_con * con
    breakdown = LossBreakdown(dice, bce, sup, con, total, om_c, om_s, consensus=distilled is not None or not s.casc)

    grad_p = grad_f = None
    if need_grad:
        d_c = weighted_soft_dice_grad(c, y, weight) + weighted_bce_grad(c, y, weight)
        grad_p = _logit_grad(c, d_c)
        grad_f = np.zeros_like(f_D)
        if distilled is not None and s.lambda_con != 0.0:
            grad_f = _contrastive_feature_grad(f_D, distilled, s)
    partition = consensus.consensus_partition(c, y, s.tau) if s.casc else None
    return Objective(breakdown, grad_p, grad_f, frozen, distilled, partition)


def _distill_frozen(f_D, frozen: Frozen) -> consensus.DistilledFeatures:
    ch = f_D.shape[0]
    flat = f_D.reshape(ch, -1)
    f_cell = flat[:, frozen.cell_indices].mean(axis=1)
    f_noise, wts, s_cell = consensus.distill_noise_feature(f_D, frozen.ind_dm, frozen.ind_dh, f_cell)
    return consensus.DistilledFeatures(
        f_cell=f_cell,
        f_noise=f_noise,
        cell_indices=frozen.cell_indices,
        noise_indices=np.concatenate([frozen.ind_dm, frozen.ind_dh]),
        noise_weights=wts,
        s_cell=s_cell,
    )


def _contrastive_feature_grad(f_D, dist: consensus.DistilledFeatures, s: LossSettings) -> np.ndarray:
    ch = f_D.shape[0]
    d_cell, d_noise = contrastive_grad(dist.f_cell, dist.f_noise, s.contrastive_mode, s.margin)
    d_cell = s.lambda_con * d_cell
    d_noise = s.lambda_con * d_noise
    fm = f_D.reshape(ch, -1)[:, dist.noise_indices].T
    d_fm, d_cell_extra = consensus.distill_noise_backward(fm, dist.f_cell, dist.noise_weights, dist.s_cell, d_noise)
    d_cell = d_cell + d_cell_extra
    grad = np.zeros((ch, f_D[0].size))
    np.add.at(grad.T, dist.noise_indices, d_fm)
    np.add.at(grad.T, dist.cell_indices, d_cell / len(dist.cell_indices))
    return grad.reshape(f_D.shape)
