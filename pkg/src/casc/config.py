"""Experiment configuration as a flat ``key=value`` file.

Lines are UTF-8, ``#`` starts a comment, later keys override earlier ones.
Command-line overrides are applied on top of the file and the fully
resolved configuration is echoed into every output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .loss import CONTRASTIVE_MODES, LossSettings
from .model import DEFAULT_CH, DEFAULT_LR, DEFAULT_MOMENTUM
from .noisegen.noise import NoiseRecipe
from .noisegen.synth import CLASS_NAMES, SynthParams
from .seeds import sub_seed

MODES = ("supervised", "casc")


@dataclass
class ExperimentConfig:
    seed: int = 0
    mode: str = "casc"
    # consensus-aware loss
    k: int | None = None  # None = max(16, 1% of pixels), rounded up to even
    tau: float = 0.5
    lambda_con: float = 1.0
    margin: float = 1.0
    contrastive_mode: str = "separative"
    # optimisation
    lr: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    epochs: int = 100
    batch_size: int = 1
    ch: int = DEFAULT_CH
    class_count: int = 4
    threshold: float = 0.5
    iou_thresh: float = 0.5
    # synthetic data
    patch_size: int = 64
    patches_train: int = 60
    patches_val: int = 10
    patches_test: int = 30
    slides: int = 21
    cells_min: int = 3
    cells_max: int = 7
    decoys_min: int = 8
    decoys_max: int = 14
    # noise recipe
    noise_T: int = 70
    rho_fp: float = 0.5
    missing_ratio: float = 0.3
    a_min: int = 10
    a_max: int = 150

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.contrastive_mode not in CONTRASTIVE_MODES:
            raise ValueError(f"contrastive_mode must be one of {CONTRASTIVE_MODES}")
        if self.k is not None and (self.k < 2 or self.k % 2):
            raise ValueError("k must be an even count >= 2")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 1 <= self.class_count <= len(CLASS_NAMES):
            raise ValueError(f"class_count must lie in [1, {len(CLASS_NAMES)}]")

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASS_NAMES[: self.class_count]

    def loss_settings(self) -> LossSettings:
        return LossSettings(
            k=self.k,
            lambda_con=self.lambda_con,
            margin=self.margin,
            contrastive_mode=self.contrastive_mode,
            casc=self.mode == "casc",
            tau=self.tau,
        )

    def synth_params(self) -> SynthParams:
        return SynthParams(
            patch_size=self.patch_size,
            patches_train=self.patches_train,
            patches_val=self.patches_val,
            patches_test=self.patches_test,
            slides=self.slides,
            cells_min=self.cells_min,
            cells_max=self.cells_max,
            decoys_min=self.decoys_min,
            decoys_max=self.decoys_max,
            class_names=self.class_names,
        )

    def noise_recipe(self) -> NoiseRecipe:
        return NoiseRecipe(
            T=self.noise_T,
            rho_fp=self.rho_fp,
            missing_ratio=self.missing_ratio,
            a_min=self.a_min,
            a_max=self.a_max,
            seed=sub_seed(self.seed, "noise"),
        )

    def to_lines(self) -> list[str]:
        return [f"{f.name}={_format(getattr(self, f.name))}" for f in fields(self)]

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + "\n"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _format(value) -> str:
    if value is None:
        return "auto"
    return repr(value) if isinstance(value, float) else str(value)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise KeyError(f"unknown config key {key!r}")
    raw = raw.strip()
    kind = _TYPES[key]
    if "None" in kind:
        if raw.lower() in ("auto", "none", ""):
            return None
        kind = kind.split("|")[0].strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_pairs(lines) -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        values.update(parse_pairs(Path(path).read_text(encoding="utf-8").splitlines()))
    for key, value in (overrides or {}).items():
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    return ExperimentConfig(**values)
