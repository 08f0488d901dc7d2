"""Command-line entry point: ``casc synth | inject | train | eval``.

Typical session::

    casc synth  --out data --seed 0
    casc inject --data data
    casc train  --data data --out run_casc --mode casc
    casc train  --data data --out run_sup --mode supervised
    casc eval   --data data --run run_casc --compare run_sup

Configuration resolves as: defaults, then ``--config`` (or the config.txt
stored with the dataset/run), then ``--seed``/``--mode``/``--set``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataset, io, metrics, model, trainer
from .config import MODES, ExperimentConfig, load_config
from .noisegen import noise, synth
from .splits import SplitPlan

log = logging.getLogger("casc")

CONFIG_FILE = "config.txt"
EXIT_ERROR = 1
EXIT_DIVERGED = 3

REPORT_COLUMNS = ("image_id", "contour_index", "action", "area", "centroid_x", "centroid_y")
ACCURACY_COLUMNS = ("class", "n", "dice", "f1")
SUMMARY_COLUMNS = ("class", "n", "dice_mean", "dice_std", "f1_mean", "f1_std")


class CliError(Exception):
    pass


def _workers() -> int:
    raw = os.environ.get("CASC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(f"CASC_THREADS must be an integer, got {raw!r}") from None


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        out["mode"] = args.mode
    return out


def resolve_config(args, fallback: Path | None = None) -> ExperimentConfig:
    path = args.config
    if path is None and fallback is not None and fallback.exists():
        path = fallback
    try:
        return load_config(path, _overrides(args))
    except (KeyError, ValueError) as exc:
        raise CliError(f"bad configuration: {exc}") from exc


def _header(cfg: ExperimentConfig, command: str) -> list[str]:
    return [f"casc {command}"] + cfg.to_lines()


def _write_table(path: Path, header, rows, cfg, command):
    io.write_csv(path, header, rows, _header(cfg, command))


def _require_dir(path: Path, what: str):
    if not path.is_dir():
        raise CliError(f"{what} directory {path} does not exist")


# -- synth -------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} is not empty (use --force to overwrite)")
    patches = synth.synth_dataset(cfg.synth_params(), cfg.seed)
    rows = []
    for p in patches:
        img_rel, mask_rel = f"images/{p.patch_id}.png", f"masks_clean/{p.patch_id}.png"
        io.write_image(out / img_rel, p.image)
        io.write_mask(out / mask_rel, p.mask)
        rows.append((p.slide_id, img_rel, mask_rel, p.class_name))
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / dataset.MANIFEST, dataset.MANIFEST_COLUMNS, rows, cfg, "synth")
    io.atomic_write_text(out / CONFIG_FILE, cfg.to_text())
    print(f"wrote {len(rows)} patches to {out}")
    return 0


# -- inject ------------------------------------------------------------------

def cmd_inject(args) -> int:
    data = Path(args.data)
    _require_dir(data, "data")
    cfg = resolve_config(args, data / CONFIG_FILE)
    rows = dataset.read_manifest(data)
    problems = dataset.validate(data, rows, cfg)
    if problems:
        raise CliError("manifest problems:\n  " + "\n  ".join(problems))
    recipe = cfg.noise_recipe()
    report, per_class = [], {}
    for i, r in enumerate(rows):
        image = io.read_image(data / r.image_path)
        clean = io.read_mask(data / r.mask_path)
        res = noise.corrupt(image, clean, recipe, noise.image_seed(recipe.seed, i))
        if res.warning:
            log.warning("%s: %s", r.image_id, res.warning)
        io.write_mask(dataset.noisy_path(data, r), res.mask)
        for e in res.events:
            report.append((r.image_id, e.contour_index, e.action, e.area, e.centroid[0], e.centroid[1]))
        per_class.setdefault(r.class_name, []).append(metrics.label_accuracy(res.mask, clean, cfg.iou_thresh))

    acc_rows = []
    for name in cfg.class_names:
        if name in per_class:
            d, f = np.array(per_class[name]).T
            acc_rows.append((name, d.size, d.mean(), f.mean()))
    if per_class:
        d, f = np.array([v for vals in per_class.values() for v in vals]).T
        acc_rows.append(("Mean", d.size, d.mean(), f.mean()))
    _write_table(data / "noise_report.csv", REPORT_COLUMNS, report, cfg, "inject")
    _write_table(data / "label_accuracy.csv", ACCURACY_COLUMNS, acc_rows, cfg, "inject")
    print(f"corrupted {len(rows)} masks ({len(report)} contour events)")
    return 0


# -- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    data, out = Path(args.data), Path(args.out)
    _require_dir(data, "data")
    cfg = resolve_config(args, data / CONFIG_FILE)
    samples, _ = dataset.load_samples(data, cfg, strict=True)
    if not dataset.has_noisy(samples):
        log.warning("no noisy masks found; training on clean labels")
    plan = trainer.make_plan(samples, cfg)
    try:
        result = trainer.train(cfg, samples, plan)
    except model.Diverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(result.best_state, out / "checkpoint.bin")
    _write_table(out / "history.csv", trainer.HISTORY_COLUMNS, [h.row() for h in result.history], cfg, "train")
    split_rows = [(sid, plan.split_of(sid)) for sid in sorted(plan.assignment)]
    _write_table(out / "split.csv", ("slide_id", "split"), split_rows, cfg, "train")
    io.atomic_write_text(out / CONFIG_FILE, cfg.to_text())
    print(f"best epoch {result.best_epoch}: val mean dice {result.best_val:.4f}")
    return 0


# -- eval --------------------------------------------------------------------

def _read_split(run: Path) -> SplitPlan:
    path = run / "split.csv"
    if not path.exists():
        raise CliError(f"no split.csv in {run}")
    return SplitPlan({r["slide_id"]: r["split"] for r in io.read_csv(path)})


def _test_dice(run: Path) -> dict[str, float]:
    path = run / "metrics.csv"
    if not path.exists():
        raise CliError(f"no metrics.csv in {run}; evaluate that run first")
    return {r["image_id"]: float(r["dice"]) for r in io.read_csv(path) if r["split"] == "test" and r["dice"]}


def cmd_eval(args) -> int:
    data, run = Path(args.data), Path(args.run)
    _require_dir(data, "data")
    _require_dir(run, "run")
    cfg = resolve_config(args, run / CONFIG_FILE)
    state = model.load_checkpoint(run / "checkpoint.bin")
    plan = _read_split(run)
    samples, skipped = dataset.load_samples(data, cfg, strict=False)
    unknown = sorted({s.slide_id for s in samples} - set(plan.assignment))
    if unknown:
        raise CliError(f"slides missing from the run's split: {unknown}")
    if not any(plan.split_of(s.slide_id) == "test" for s in samples):
        raise CliError("test split is empty")

    rows = trainer.evaluate(state, samples, plan, cfg, workers=_workers())
    header = trainer.METRIC_COLUMNS + ("note",)
    table = [[r.get(c) for c in trainer.METRIC_COLUMNS] + [""] for r in rows]
    for r, msg in skipped:
        log.warning("skipping %s: %s", r.image_id, msg)
        table.append([r.image_id, r.class_name] + [None] * 4 + [plan.split_of(r.slide_id)] + [None] * 4 + [msg])
    _write_table(run / "metrics.csv", header, table, cfg, "eval")

    summary = trainer.summarize(rows, cfg)
    srows = [(name, c["n"], c["dice_mean"], c["dice_std"], c["f1_mean"], c["f1_std"])
             for name, c in summary["classes"].items()]
    srows.append(("Mean", sum(c["n"] for c in summary["classes"].values()),
                  summary["mean_dice"], None, summary["mean_f1"], None))
    _write_table(run / "summary.csv", SUMMARY_COLUMNS, srows, cfg, "eval")

    report = [(k, summary[k]) for k in sorted(summary) if k.startswith("train_")]
    if args.compare:
        report += _compare(rows, Path(args.compare))
    _write_table(run / "report.csv", ("key", "value"), report, cfg, "eval")
    print(f"mean dice {summary['mean_dice']:.4f}, mean f1 {summary['mean_f1']:.4f}")
    return 0


def _compare(rows, other: Path) -> list[tuple]:
    # compare at the precision stored in metrics.csv so a run matches itself
    mine = {r["image_id"]: float(io.fmt(r["dice"])) for r in rows if r["split"] == "test"}
    theirs = _test_dice(other)
    if set(mine) != set(theirs):
        raise CliError(f"cannot compare: test image sets differ ({len(mine)} vs {len(theirs)} images)")
    ids = sorted(mine)
    try:
        res = metrics.wilcoxon_signed_rank([mine[i] for i in ids], [theirs[i] for i in ids])
    except ValueError as exc:
        raise CliError(f"cannot compare: {exc}") from exc
    return [
        ("compare_run", str(other)),
        ("compare_mean_dice_diff", float(np.mean([mine[i] - theirs[i] for i in ids]))),
        ("wilcoxon_n", res.n),
        ("wilcoxon_statistic", res.statistic),
        ("wilcoxon_p", res.p_value),
        ("wilcoxon_bucket", res.bucket),
        ("wilcoxon_method", res.method),
    ]


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--seed", type=int, help="top-level seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="casc", description="Consensus-aware corrective learning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inject", parents=[common], help="write noisy masks next to the clean ones")
    p.add_argument("--data", required=True, type=Path)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--mode", choices=MODES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a trained run")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--compare", type=Path, help="another evaluated run for a paired Wilcoxon test")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(1):
            return args.func(args)
    except (CliError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
