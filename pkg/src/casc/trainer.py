"""Training loops, model selection and evaluation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import loss, metrics, model
from .config import ExperimentConfig
from .seeds import sub_seed
from .splits import SplitPlan, split_slides

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "dice_term", "bce_term", "contrastive_term", "val_mean_dice")
METRIC_COLUMNS = (
    "image_id", "class", "dice", "f1", "fp_iou", "fn_iou",
    "split", "tp_dice", "tp_f1", "fp_iou_win", "fn_iou_win",
)


@dataclass
class Sample:
    patch_id: str
    slide_id: str
    class_name: str
    class_index: int
    image: np.ndarray = field(repr=False)
    clean: np.ndarray | None = field(repr=False)
    noisy: np.ndarray | None = field(default=None, repr=False)
    x: np.ndarray | None = field(default=None, repr=False)

    @property
    def label(self) -> np.ndarray:
        """Training target: the noisy annotation when one exists."""
        return self.noisy if self.noisy is not None else self.clean


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dice_term: float
    bce_term: float
    contrastive_term: float
    val_mean_dice: float

    def row(self):
        return [self.epoch, self.train_loss, self.dice_term, self.bce_term, self.contrastive_term, self.val_mean_dice]


@dataclass
class TrainResult:
    best_state: model.ModelState
    best_epoch: int
    best_val: float
    history: list[EpochRecord]
    trained_ids: set[str]


def make_plan(samples, cfg: ExperimentConfig) -> SplitPlan:
    return split_slides([s.slide_id for s in samples], seed=sub_seed(cfg.seed, "split"))


def _inputs(sample: Sample, cfg: ExperimentConfig) -> np.ndarray:
    if sample.x is None:
        sample.x = model.make_input(sample.image, sample.class_index, cfg.class_count)
    return sample.x


def predict(state: model.ModelState, sample: Sample, cfg: ExperimentConfig) -> np.ndarray:
    out = model.forward(state, _inputs(sample, cfg), keep_cache=False)
    return (out.c >= cfg.threshold).astype(np.uint8)


def mean_class_dice(state, samples, cfg: ExperimentConfig) -> float:
    """Mean over classes of the per-class mean Dice against clean masks."""
    per_class: dict[str, list[float]] = {}
    for s in samples:
        per_class.setdefault(s.class_name, []).append(metrics.dice_score(predict(state, s, cfg), s.clean))
    if not per_class:
        return float("nan")
    return float(np.mean([np.mean(v) for v in per_class.values()]))


def train(cfg: ExperimentConfig, samples: list[Sample], plan: SplitPlan | None = None) -> TrainResult:
    """Train one model; keep the parameters with the best validation Dice.

    Ties in validation Dice keep the earliest epoch.
    """
    plan = plan or make_plan(samples, cfg)
    train_set = [s for s in samples if plan.split_of(s.slide_id) == "train"]
    val_set = [s for s in samples if plan.split_of(s.slide_id) == "val"]
    if not train_set:
        raise ValueError("training split is empty")
    if not val_set:
        raise ValueError("validation split is empty")

    state = model.init_model(sub_seed(cfg.seed, "init"), cfg.ch, cfg.class_count)
    settings = cfg.loss_settings()
    order_rng = np.random.default_rng(sub_seed(cfg.seed, "shuffle"))
    best_params = state.copy_params()
    best_epoch, best_val = 0, -np.inf
    history: list[EpochRecord] = []
    trained: set[str] = set()

    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(4)
        pending = 0
        for i in order_rng.permutation(len(train_set)):
            s = train_set[i]
            out = model.forward(state, _inputs(s, cfg))
            if not np.all(np.isfinite(out.p)):
                raise model.Diverged(f"diverged at epoch {epoch}")
            obj = loss.total_loss(out.p, out.f_D, s.label, settings)
            b = obj.breakdown
            if not np.isfinite(b.total):
                raise model.Diverged(f"diverged at epoch {epoch}")
            sums += (b.total, b.dice_term, b.bce_term, b.contrastive)
            model.backward(state, obj.grad_p / cfg.batch_size, obj.grad_f_D / cfg.batch_size)
            trained.add(s.patch_id)
            pending += 1
            if pending == cfg.batch_size:
                _step(state, cfg, epoch)
                pending = 0
        if pending:
            _step(state, cfg, epoch)
        val = mean_class_dice(state, val_set, cfg)
        means = sums / len(train_set)
        history.append(EpochRecord(epoch, *means, val))
        log.debug("epoch %d loss %.4f val %.4f", epoch, means[0], val)
        if val > best_val:
            best_val, best_epoch = val, epoch
            best_params = state.copy_params()

    leaked = trained - {s.patch_id for s in train_set}
    assert not leaked, f"non-training patches received gradients: {sorted(leaked)}"
    best = model.ModelState(ch=state.ch, class_count=state.class_count, params=best_params)
    return TrainResult(best, best_epoch, float(best_val), history, trained)


def _step(state, cfg, epoch):
    try:
        model.sgd_step(state, cfg.lr, cfg.momentum)
    except model.Diverged as exc:
        raise model.Diverged(f"diverged at epoch {epoch}") from exc


def _eval_row(state, s: Sample, split: str, cfg: ExperimentConfig):
    pred = predict(state, s, cfg)
    row = {
        "image_id": s.patch_id, "class": s.class_name, "split": split,
        "dice": metrics.dice_score(pred, s.clean),
        "f1": metrics.instance_f1(pred, s.clean, cfg.iou_thresh),
    }
    if split == "train" and s.noisy is not None:
        rep = metrics.training_region_report(pred, s.noisy, s.clean, cfg.iou_thresh)
        row.update(
            fp_iou=rep.fp_iou, fn_iou=rep.fn_iou, tp_dice=rep.tp_dice, tp_f1=rep.tp_f1,
            fp_iou_win=rep.fp_iou_win, fn_iou_win=rep.fn_iou_win,
        )
    return row


def evaluate(state, samples, plan: SplitPlan, cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    """Per-image metric rows: test images against clean masks, plus the
    training images' noise-region report when noisy labels are present.

    Rows come back in input order regardless of ``workers``.
    """
    jobs = []
    for s in samples:
        split = plan.split_of(s.slide_id)
        if split == "test" or (split == "train" and s.noisy is not None):
            jobs.append((s, split))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda j: _eval_row(state, j[0], j[1], cfg), jobs))
    return [_eval_row(state, s, split, cfg) for s, split in jobs]


def summarize(rows, cfg: ExperimentConfig) -> dict:
    """Per-class mean and std of test Dice/F1, the mean over classes, and
    mean training-region scores."""
    test = [r for r in rows if r["split"] == "test"]
    out = {"classes": {}}
    for name in cfg.class_names:
        sel = [r for r in test if r["class"] == name]
        if not sel:
            continue
        d = np.array([r["dice"] for r in sel])
        f = np.array([r["f1"] for r in sel])
        out["classes"][name] = {"n": len(sel), "dice_mean": d.mean(), "dice_std": d.std(),
                                "f1_mean": f.mean(), "f1_std": f.std()}
    cls = out["classes"].values()
    out["mean_dice"] = float(np.mean([c["dice_mean"] for c in cls])) if cls else float("nan")
    out["mean_f1"] = float(np.mean([c["f1_mean"] for c in cls])) if cls else float("nan")
    train_rows = [r for r in rows if r["split"] == "train"]
    for key in ("tp_dice", "tp_f1", "fp_iou", "fn_iou", "fp_iou_win", "fn_iou_win"):
        vals = [r[key] for r in train_rows if r.get(key) is not None]
        out[f"train_{key}"] = float(np.mean(vals)) if vals else float("nan")
    return out
