import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from casc import metrics

from .oracles import dice_count, instance_f1, wilcoxon_exhaustive

masks = st.tuples(st.integers(1, 8), st.integers(1, 8)).flatmap(
    lambda shape: st.tuples(
        arrays(np.uint8, shape, elements=st.integers(0, 1)),
        arrays(np.uint8, shape, elements=st.integers(0, 1)),
    )
)


def test_dice_examples():
    a = np.array([[1, 1], [0, 1]])
    assert metrics.dice_score(a, a) == 1.0
    assert metrics.dice_score([[1, 0]], [[0, 1]]) == 0.0
    p = np.array([1, 1, 1, 1, 0, 0])
    g = np.array([0, 0, 1, 1, 1, 1])
    assert metrics.dice_score(p, g) == 0.5
    assert metrics.dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        metrics.dice_score(np.zeros((2, 2)), np.zeros((3, 3)))


def test_dice_matches_counting_oracle_3x3():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        p = rng.integers(0, 2, 9)
        g = rng.integers(0, 2, 9)
        assert metrics.dice_score(p.reshape(3, 3), g.reshape(3, 3)) == dice_count(p, g)


def _blob(shape, *boxes):
    m = np.zeros(shape, dtype=np.uint8)
    for y0, y1, x0, x1 in boxes:
        m[y0:y1, x0:x1] = 1
    return m


def test_instance_f1_examples():
    gt = _blob((10, 10), (1, 4, 1, 4))
    assert metrics.instance_f1(gt, gt) == 1.0
    pred = _blob((10, 10), (1, 4, 1, 4), (6, 9, 6, 9))
    assert metrics.instance_f1(pred, gt) == pytest.approx(2 / 3)
    assert metrics.instance_f1(np.zeros((10, 10)), gt) == 0.0
    assert metrics.instance_f1(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_instance_f1_threshold():
    gt = _blob((8, 8), (0, 4, 0, 4))
    pred = _blob((8, 8), (0, 2, 0, 4))  # IoU exactly 0.5
    assert metrics.instance_f1(pred, gt, 0.5) == 1.0
    assert metrics.instance_f1(pred, gt, 0.51) == 0.0
    with pytest.raises(ValueError):
        metrics.instance_f1(pred, gt, 0.0)


def test_instance_f1_greedy_prefers_highest_iou():
    # one large gt blob, two preds: the better-overlapping one wins the match
    gt = _blob((12, 12), (0, 4, 0, 8))
    pred = _blob((12, 12), (0, 4, 0, 6), (6, 8, 0, 2))
    assert metrics.instance_f1(pred, gt) == pytest.approx(2 / 3)


@settings(max_examples=300, deadline=None)
@given(masks)
def test_instance_f1_matches_oracle_and_is_symmetric(pair):
    a, b = pair
    got = metrics.instance_f1(a, b)
    assert got == pytest.approx(instance_f1(a.tolist(), b.tolist()))
    assert 0.0 <= got <= 1.0
    assert metrics.instance_f1(b, a) == pytest.approx(got)
    assert metrics.dice_score(a, b) == metrics.dice_score(b, a)
    assert 0.0 <= metrics.dice_score(a, b) <= 1.0


def test_region_iou_examples():
    region = np.zeros(20, dtype=np.uint8)
    region[:10] = 1
    assert metrics.region_iou(np.ones(20), region) == 1.0
    assert metrics.region_iou(1 - region, region) == 0.0
    pred = np.zeros(20, dtype=np.uint8)
    pred[:5] = 1
    assert metrics.region_iou(pred, region) == 0.5
    assert metrics.region_iou(pred, np.zeros(20)) is None


def test_region_iou_window():
    region = _blob((9, 9), (3, 6, 3, 6))
    # predicted beyond the 2-pixel window does not count against the region
    pred = _blob((9, 9), (3, 6, 3, 6), (0, 1, 0, 1))
    assert metrics.region_iou_window(pred, region) == 1.0
    pred = _blob((9, 9), (3, 6, 2, 6))  # one extra column inside the window
    assert metrics.region_iou_window(pred, region) == pytest.approx(9 / 12)
    assert metrics.region_iou_window(pred, np.zeros((9, 9))) is None


def _noise_case():
    clean = _blob((4, 4), (0, 2, 0, 2), (3, 4, 3, 4))
    noisy = clean.copy()
    noisy[3, 3] = 0  # FN pixel
    noisy[0, 3] = 1  # FP pixel
    return noisy, clean


def test_region_report_perfect_correction_and_memorisation():
    noisy, clean = _noise_case()
    rep = metrics.training_region_report(clean, noisy, clean)
    assert (rep.fp_iou, rep.fn_iou) == (0.0, 1.0)
    assert rep.tp_dice == 1.0
    rep = metrics.training_region_report(noisy, noisy, clean)
    assert (rep.fp_iou, rep.fn_iou) == (1.0, 0.0)


def test_region_report_hand_case():
    noisy, clean = _noise_case()
    pred = np.zeros((4, 4), dtype=np.uint8)
    pred[0, 0] = pred[0, 1] = 1  # half the TP square
    pred[0, 3] = 1  # keeps the FP pixel
    rep = metrics.training_region_report(pred, noisy, clean)
    assert rep.fp_iou == 1.0
    assert rep.fn_iou == 0.0
    assert rep.tp_dice == pytest.approx(2 * 2 / (2 + 4))
    assert rep.tp_f1 == 1.0  # IoU 0.5 with the single TP instance


@settings(max_examples=200)
@given(masks)
def test_noise_regions_partition(pair):
    noisy, clean = pair
    r_tp, r_fp, r_fn = metrics.noise_regions(noisy, clean)
    assert not np.any(r_tp & r_fp) and not np.any(r_tp & r_fn) and not np.any(r_fp & r_fn)
    np.testing.assert_array_equal(r_tp | r_fp, noisy > 0)
    np.testing.assert_array_equal(r_tp | r_fn, clean > 0)


def test_label_accuracy_examples():
    clean = _blob((6, 6), (0, 2, 0, 2), (4, 6, 4, 6))
    assert metrics.label_accuracy(clean, clean) == (1.0, 1.0)
    assert metrics.label_accuracy(np.zeros_like(clean), clean) == (0.0, 0.0)
    noisy = _blob((6, 6), (0, 2, 0, 2))
    d, f = metrics.label_accuracy(noisy, clean)
    assert d == pytest.approx(2 * 4 / 12)
    assert f == pytest.approx(2 / 3)


def test_wilcoxon_all_positive():
    res = metrics.wilcoxon_signed_rank([1.1, 2.2, 3.3, 4.4, 5.5], [1, 2, 3, 4, 5])
    assert res.statistic == 0.0
    assert res.method == "exact"
    assert res.p_value == pytest.approx(2 / 32)
    assert res.bucket == "n.s."


def test_wilcoxon_no_signal():
    a = [0.3, 0.5, 0.7, 0.9, 0.1, 0.2]
    res = metrics.wilcoxon_signed_rank(a, a)
    assert res.bucket == "no-signal" and res.p_value is None


def test_wilcoxon_too_few_and_mismatch():
    with pytest.raises(ValueError):
        metrics.wilcoxon_signed_rank([1, 2, 3], [0, 0, 0])
    with pytest.raises(ValueError):
        metrics.wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 4])


def test_wilcoxon_textbook_n6_exhaustive():
    d = [0.8, -0.3, 1.5, 2.1, 0.4, 1.1]
    res = metrics.wilcoxon_signed_rank(d, [0.0] * 6)
    w, p = wilcoxon_exhaustive(d)
    assert res.statistic == w == 1.0
    assert res.p_value == pytest.approx(p, abs=1e-12)
    # W <= 1 occurs for sign patterns with W+ or W- in {0, 1}: 4 of 64
    assert p == pytest.approx(4 / 64)


@pytest.mark.parametrize("n", [5, 6, 7, 8])
def test_wilcoxon_exact_matches_enumeration(n):
    rng = np.random.default_rng(n)
    for trial in range(40):
        # rounded values force tied magnitudes in some trials
        d = np.round(rng.normal(size=n), 1 if trial % 2 else 3)
        d[d == 0] = 0.5
        res = metrics.wilcoxon_signed_rank(d, np.zeros(n))
        w, p = wilcoxon_exhaustive(d.tolist())
        assert res.statistic == pytest.approx(w)
        assert res.p_value == pytest.approx(p, abs=1e-12)


def test_wilcoxon_exact_agrees_with_scipy_without_ties():
    rng = np.random.default_rng(1)
    for n in (6, 9, 12):
        d = rng.permutation(np.arange(1, n + 1)) * rng.choice([-1, 1], n) * 0.01
        res = metrics.wilcoxon_signed_rank(d, np.zeros(n))
        ref = stats.wilcoxon(d, method="exact")
        assert res.statistic == ref.statistic
        assert res.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_wilcoxon_normal_approximation_agrees_with_scipy():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=30), rng.normal(0.3, 1, size=30)
    res = metrics.wilcoxon_signed_rank(a, b)
    ref = stats.wilcoxon(a, b, method="approx", correction=True)
    assert res.method == "normal"
    assert res.p_value == pytest.approx(ref.pvalue, rel=1e-9)


@pytest.mark.parametrize("p, bucket", [(0.0005, "p<0.001"), (0.005, "p<0.01"), (0.03, "p<0.05"), (0.2, "n.s.")])
def test_p_bucket(p, bucket):
    assert metrics.p_bucket(p) == bucket


def test_exact_distribution_sums_to_one():
    ranks = np.arange(1, 8, dtype=float)
    assert metrics._exact_p(ranks, ranks.sum()) == pytest.approx(1.0)
    total = sum(1 for _ in itertools.product((0, 1), repeat=7))
    assert metrics._exact_p(ranks, 0) == pytest.approx(2 / total)
