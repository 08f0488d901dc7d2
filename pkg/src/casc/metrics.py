"""Evaluation metrics: Dice, instance F1, noise-region coverage, Wilcoxon."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .noisegen.contours import EIGHT, label_components

EXACT_MAX_N = 12


def _pair(a, b):
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice_score(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(p & g)) / total


def instance_f1(pred, gt, iou_thresh: float = 0.5) -> float:
    """F1 over 8-connected instances, matched greedily by descending IoU."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    p, g = _pair(pred, gt)
    lp, n_p = label_components(p)
    lg, n_g = label_components(g)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    inter = np.bincount(lp.ravel() * (n_g + 1) + lg.ravel(), minlength=(n_p + 1) * (n_g + 1))
    inter = inter.reshape(n_p + 1, n_g + 1)[1:, 1:]
    area_p = np.bincount(lp.ravel(), minlength=n_p + 1)[1:]
    area_g = np.bincount(lg.ravel(), minlength=n_g + 1)[1:]
    iou = inter / (area_p[:, None] + area_g[None, :] - inter)
    pi, gi = np.nonzero(iou >= iou_thresh)
    order = np.lexsort((gi, pi, -iou[pi, gi]))
    used_p, used_g = set(), set()
    tp = 0
    for o in order:
        a, b = int(pi[o]), int(gi[o])
        if a in used_p or b in used_g:
            continue
        used_p.add(a)
        used_g.add(b)
        tp += 1
    return 2.0 * tp / (2.0 * tp + (n_p - tp) + (n_g - tp))


def region_iou(pred, region) -> float | None:
    """Share of ``region`` covered by ``pred``; prediction outside is ignored.

    ``None`` when the region is empty.
    """
    p, r = _pair(pred, region)
    size = int(r.sum())
    if size == 0:
        return None
    return int(np.sum(p & r)) / size


def region_iou_window(pred, region, radius: int = 2) -> float | None:
    """IoU of ``region`` with the prediction clipped to a dilation of it."""
    p, r = _pair(pred, region)
    if not r.any():
        return None
    window = ndimage.binary_dilation(r, structure=EIGHT, iterations=radius)
    pw = p & window
    return int(np.sum(pw & r)) / int(np.sum(pw | r))


@dataclass
class RegionReport:
    tp_dice: float | None
    tp_f1: float | None
    fp_iou: float | None
    fn_iou: float | None
    fp_iou_win: float | None = None
    fn_iou_win: float | None = None


def noise_regions(noisy, clean):
    n, c = _pair(noisy, clean)
    return n & c, n & ~c, c & ~n


def training_region_report(pred, noisy_label, clean_gt, iou_thresh: float = 0.5) -> RegionReport:
    """Agreement of a training-set prediction with the label's TP/FP/FN regions.

    TP scores use the prediction with the noise regions masked out, so that
    correcting a noisy pixel never counts against the TP region.
    """
    p, _ = _pair(pred, noisy_label)
    r_tp, r_fp, r_fn = noise_regions(noisy_label, clean_gt)
    p_tp = p & ~r_fp & ~r_fn
    return RegionReport(
        tp_dice=dice_score(p_tp, r_tp),
        tp_f1=instance_f1(p_tp, r_tp, iou_thresh),
        fp_iou=region_iou(p, r_fp),
        fn_iou=region_iou(p, r_fn),
        fp_iou_win=region_iou_window(p, r_fp),
        fn_iou_win=region_iou_window(p, r_fn),
    )


def label_accuracy(noisy, clean, iou_thresh: float = 0.5) -> tuple[float, float]:
    return dice_score(noisy, clean), instance_f1(noisy, clean, iou_thresh)


@dataclass
class WilcoxonResult:
    statistic: float | None
    p_value: float | None
    bucket: str
    n: int
    method: str


def p_bucket(p: float) -> str:
    for cut in (0.001, 0.01, 0.05):
        if p < cut:
            return f"p<{cut:g}"
    return "n.s."


def _exact_p(ranks: np.ndarray, w: float) -> float:
    """P(min(W+, W-) <= w) under random signs, by subset-sum counting."""
    units = np.rint(ranks * 2).astype(np.int64)  # average ranks are half-integers
    total = int(units.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for u in units:
        counts[u:] = counts[u:] + counts[: total + 1 - u].copy()
    t = np.arange(total + 1)
    hit = np.minimum(t, total - t) <= int(round(2 * w))
    return float(counts[hit].sum() / counts.sum())


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided signed-rank test on paired samples.

    Exact for ``n <= 12`` non-zero differences, otherwise the normal
    approximation with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(None, None, "no-signal", 0, "none")
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        p = _exact_p(ranks, w)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
        z = (w - mean + 0.5) / math.sqrt(var)
        p = min(1.0, math.erfc(-z / math.sqrt(2.0)))
        method = "normal"
    return WilcoxonResult(w, p, p_bucket(p), n, method)
