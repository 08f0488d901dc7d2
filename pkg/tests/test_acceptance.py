"""Acceptance criteria, one test per criterion.

Each test logs a PASS/FAIL line that is shown in the ``acceptance``
section of the pytest terminal summary.
"""

import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from casc import loss, metrics, trainer
from casc.cli import main
from casc.config import ExperimentConfig
from casc.consensus import consensus_partition, distill, distill_cell_feature
from casc.noisegen import contours, noise, synth
from casc.noisegen.noise import NoiseRecipe

from .gradcheck import max_relative_error, tiny_problem
from .oracles import cell_feature, dice_count, noise_feature, wilcoxon_exhaustive


def test_criterion_1_gradient_fidelity(record):
    t0 = time.perf_counter()
    worst = {}
    # separative at m=5 keeps the hinge active on this problem; m=1 is also
    # checked so the default setting is covered
    for mode, margin in (("literal", 1.0), ("separative", 1.0), ("separative", 5.0)):
        state, x, y = tiny_problem(0)
        settings = loss.LossSettings(k=8, contrastive_mode=mode, margin=margin)
        worst[f"{mode}/m={margin:g}"], _ = max_relative_error(state, x, y, settings)
    dt = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + f"; {dt:.1f}s"
    record(1, "gradient fidelity", max(worst.values()) < 1e-4 and dt < 60, detail)


def test_criterion_2_consensus_partition(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = 0
    for code in range(512):
        y = np.array([(code >> i) & 1 for i in range(9)]).reshape(3, 3)
        for _ in range(100):
            part = consensus_partition(rng.uniform(0, 1, (3, 3)), y)
            stack = np.stack([part.cp, part.cn, part.dm, part.dh]).astype(int)
            bad += int(np.any(stack.sum(axis=0) != 1))
    dt = time.perf_counter() - t0
    record(2, "consensus partition", bad == 0 and dt < 10, f"{bad} violations in 51200 grids; {dt:.1f}s")


def test_criterion_3_distillation_oracles(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    bad = 0
    for i in range(1000):
        k = int(rng.choice([2, 4, 8, 16]))
        f_D = rng.normal(size=(4, 8, 8))
        c = rng.uniform(0.01, 0.99, (8, 8))
        y = rng.integers(0, 2, (8, 8))
        y[0, 0] = 1
        f_cell, _ = distill_cell_feature(f_D, c, y, k)
        want, _ = cell_feature(f_D.tolist(), c.tolist(), y.tolist(), k)
        d = distill(f_D, c, y, k)
        rows = f_D.reshape(4, -1)[:, d.noise_indices].T
        ok = (
            np.allclose(f_cell, want, rtol=0, atol=1e-12)
            and abs(d.noise_weights.sum() - 1.0) <= 1e-9
            and np.all(d.f_noise >= rows.min(axis=0) - 1e-12)
            and np.all(d.f_noise <= rows.max(axis=0) + 1e-12)
            and np.allclose(d.f_noise, noise_feature(rows.tolist(), d.f_cell.tolist())[0], atol=1e-12)
        )
        bad += not ok
    dt = time.perf_counter() - t0
    record(3, "distillation oracles", bad == 0 and dt < 30, f"{bad}/1000 mismatches; {dt:.1f}s")


def test_criterion_4_weight_bounds(record):
    rng = np.random.default_rng(4)
    n = 100_000
    oc = loss.omega_c(rng.uniform(0, 1, n), rng.integers(0, 2, n))
    os_ = loss.omega_sim(rng.uniform(-1, 1, n), rng.uniform(-1, 1, n))
    bad = int(np.sum((oc < 1) | (oc > math.e))) + int(np.sum((os_ < math.exp(-2)) | (os_ > math.exp(2))))
    record(4, "weight bounds", bad == 0, f"{bad} violations over 2x{n} pixels")


def _grid_of_blobs(n, size=64, r=2):
    m = np.zeros((size, size), dtype=np.uint8)
    for i in range(n):
        y, x = 4 + (i // 6) * 9, 4 + (i % 6) * 9
        m[y - r:y + r + 1, x - r:x + r + 1] = 1
    return m


def test_criterion_5_noise_contracts(record):
    problems = []
    for n in (1, 7, 10, 13):
        m = _grid_of_blobs(n)
        for r in (0.0, 0.3, 0.5, 1.0):
            kept = len(contours.extract_contours(noise.remove_fn(m, r, seed=n).mask))
            if kept != math.floor((1 - r) * n + 1e-9):
                problems.append(f"remove_fn n={n} r={r} kept {kept}")
    recipe = NoiseRecipe(T=70, rho_fp=0.5, a_min=10, a_max=150)
    patches = synth.synth_dataset(synth.SynthParams(patches_train=120, patches_val=30, patches_test=50), seed=5)
    added = 0
    for p in patches:
        res = noise.inject_fp(p.image, p.mask, recipe)
        n_cells = len(contours.extract_contours(p.mask))
        new = res.mask.astype(bool) & ~p.mask.astype(bool)
        # a partly overlapping candidate would leave added pixels fused to a cell
        lab, _ = contours.label_components(res.mask)
        fused = set(np.unique(lab[new])) & set(np.unique(lab[p.mask.astype(bool)]))
        if fused:
            problems.append(f"{p.patch_id} overlaps Y")
        if np.any(new & p.mask.astype(bool)) or not np.all(res.mask >= p.mask):
            problems.append(f"{p.patch_id} alters Y")
        if len(res.events) > noise.round_half_up(0.5 * n_cells):
            problems.append(f"{p.patch_id} over limit")
        if not all(10 <= e.area <= 150 for e in res.events):
            problems.append(f"{p.patch_id} size bound")
        added += len(res.events)
    detail = f"{len(patches)} patches, {added} added contours, {len(problems)} problems {problems[:3]}"
    record(5, "noise-generator contracts", not problems and len(patches) == 200, detail)


def _box(shape, *boxes):
    m = np.zeros(shape, dtype=np.uint8)
    for y0, y1, x0, x1 in boxes:
        m[y0:y1, x0:x1] = 1
    return m


def test_criterion_6_metric_oracles(record):
    rng = np.random.default_rng(6)
    dice_bad = 0
    for _ in range(10_000):
        p, g = rng.integers(0, 2, 9), rng.integers(0, 2, 9)
        dice_bad += metrics.dice_score(p.reshape(3, 3), g.reshape(3, 3)) != dice_count(p, g)
    gt = _box((10, 10), (1, 4, 1, 4))
    f1 = (
        metrics.instance_f1(gt, gt),
        metrics.instance_f1(_box((10, 10), (1, 4, 1, 4), (6, 9, 6, 9)), gt),
        metrics.instance_f1(np.zeros((10, 10)), gt),
    )
    f1_ok = f1[0] == 1.0 and abs(f1[1] - 2 / 3) < 1e-12 and f1[2] == 0.0
    wil_bad = 0
    for n in (5, 6, 7, 8):
        for trial in range(50):
            d = np.round(rng.normal(size=n), 1 if trial % 2 else 3)
            d[d == 0] = 0.5
            res = metrics.wilcoxon_signed_rank(d, np.zeros(n))
            w, p = wilcoxon_exhaustive(d.tolist())
            wil_bad += res.method != "exact" or res.statistic != w or abs(res.p_value - p) > 1e-12
    detail = f"dice {dice_bad}/10000 mismatches, f1 cases {tuple(round(v, 4) for v in f1)}, wilcoxon {wil_bad}/200"
    record(6, "metric oracles", dice_bad == 0 and f1_ok and wil_bad == 0, detail)


SEEDS = (0, 1, 2)


def _corrective_run(seed: int, mode: str):
    cfg = ExperimentConfig(seed=seed, mode=mode, epochs=50)
    recipe = cfg.noise_recipe()
    samples = []
    for i, p in enumerate(synth.synth_dataset(cfg.synth_params(), cfg.seed)):
        r = noise.corrupt(p.image, p.mask, recipe, noise.image_seed(recipe.seed, i))
        samples.append(trainer.Sample(p.patch_id, p.slide_id, p.class_name, cfg.class_names.index(p.class_name),
                                      p.image, p.mask, r.mask))
    t0 = time.perf_counter()
    with threadpool_limits(1):
        plan = trainer.make_plan(samples, cfg)
        res = trainer.train(cfg, samples, plan)
        summary = trainer.summarize(trainer.evaluate(res.best_state, samples, plan, cfg, workers=1), cfg)
    summary["seconds"] = time.perf_counter() - t0
    return summary


@pytest.mark.slow
def test_criterion_7_corrective_trend(record):
    lines, ok = [], True
    for seed in SEEDS:
        sup, casc = _corrective_run(seed, "supervised"), _corrective_run(seed, "casc")
        a = casc["mean_dice"] >= sup["mean_dice"] + 0.01
        b = casc["train_fp_iou"] < sup["train_fp_iou"]
        c = casc["train_fn_iou"] > sup["train_fn_iou"]
        t = max(sup["seconds"], casc["seconds"]) < 20 * 60
        ok &= a and b and c and t
        lines.append(
            f"seed {seed}: dice {sup['mean_dice']:.4f}->{casc['mean_dice']:.4f} {'ok' if a else 'NO'}, "
            f"fp {sup['train_fp_iou']:.4f}->{casc['train_fp_iou']:.4f} {'ok' if b else 'NO'}, "
            f"fn {sup['train_fn_iou']:.4f}->{casc['train_fn_iou']:.4f} {'ok' if c else 'NO'}, "
            f"max {max(sup['seconds'], casc['seconds']):.0f}s"
        )
    record(7, "corrective trend (each seed)", ok, "; ".join(lines))


def _pipeline(root, workdir):
    data, run = root / workdir / "data", root / workdir / "run"
    small = ["--set", "epochs=3"]
    assert main(["synth", "--out", str(data), "--seed", "8"]) == 0
    assert main(["inject", "--data", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(run), *small]) == 0
    assert main(["eval", "--data", str(data), "--run", str(run)]) == 0
    return run


def test_criterion_8_determinism(record, tmp_path):
    a, b = _pipeline(tmp_path, "a"), _pipeline(tmp_path, "b")
    same = {name: (a / name).read_bytes() == (b / name).read_bytes()
            for name in ("history.csv", "metrics.csv", "summary.csv", "checkpoint.bin")}
    record(8, "determinism", all(same.values()), ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
