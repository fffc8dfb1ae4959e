"""Experiment configuration: a versioned YAML document mapped onto dataclasses.

Example (every key optional except where noted)::

    schema_version: 1
    data_dir: data            # required for crossval
    run_dir: runs
    folds: 5
    seed: 0
    arms: [Baseline, UADiff-Concat, ReDiffiNet]
    threshold: 0.5
    rediffinet_variant: concat
    segmenter: {levels: 3, base_width: 8, activation: leaky_relu, normalization: instance}
    baseline_train: {epochs: 2, lr: 0.01, weight_decay: 0.0001}
    denoiser: {levels: 3, base_width: 8, T: 1000, beta_min: 0.0001, beta_max: 0.02,
               sample_steps: 10, soft_conditioning: false, background_multiplier: 0.2}
    diffusion_train: {steps: 80, lr: 0.003, weight_decay: 0.0001}
    loss_weights: {dice: 1.0, bce: 1.0, mse: 1.0}
    metrics: {empty_dice: 1.0, hd95_sentinel: 373.13}
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .diffusion import ConditioningVariant, DenoiserConfig, TargetMode
from .losses import LossWeights
from .metrics import MetricConventions
from .segmenter import SegmenterConfig

SCHEMA_VERSION = 1

ARMS = {
    "Baseline": None,
    "UADiff-PredOnly": (ConditioningVariant.PRED_ONLY, TargetMode.DIRECT_MASK),
    "UADiff-Concat": (ConditioningVariant.CONCAT, TargetMode.DIRECT_MASK),
    "UADiff-Masked": (ConditioningVariant.MASKED, TargetMode.DIRECT_MASK),
    "ReDiffiNet": (None, TargetMode.DISCREPANCY),  # variant from rediffinet_variant
}


@dataclass
class StepBudget:
    epochs: int = 2
    steps: int = 80
    lr: float = 1e-2
    weight_decay: float = 1e-4


@dataclass
class ExperimentConfig:
    data_dir: str = "data"
    run_dir: str = "runs"
    folds: int = 5
    seed: int = 0
    arms: list[str] = field(default_factory=lambda: ["Baseline", "UADiff-Concat", "ReDiffiNet"])
    threshold: float = 0.5
    rediffinet_variant: str = "concat"
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    baseline_train: StepBudget = field(default_factory=lambda: StepBudget(epochs=2, lr=1e-2))
    denoiser: dict = field(default_factory=dict)
    diffusion_train: StepBudget = field(default_factory=lambda: StepBudget(steps=80, lr=3e-3))
    loss_weights: LossWeights = field(default_factory=LossWeights)
    metrics: MetricConventions = field(default_factory=MetricConventions)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not self.arms:
            raise ValueError("arms must not be empty")
        unknown = [a for a in self.arms if a not in ARMS]
        if unknown:
            raise ValueError(f"unknown arms {unknown}; choose from {list(ARMS)}")
        if any(a != "Baseline" for a in self.arms) and "Baseline" not in self.arms:
            raise ValueError("diffusion arms need the Baseline arm")
        ConditioningVariant(self.rediffinet_variant)

    def denoiser_config(self, arm) -> DenoiserConfig:
        variant, mode = ARMS[arm]
        variant = variant or ConditioningVariant(self.rediffinet_variant)
        return DenoiserConfig(variant=variant, target_mode=mode, **self.denoiser)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d


_NESTED = {
    "segmenter": SegmenterConfig,
    "baseline_train": StepBudget,
    "diffusion_train": StepBudget,
    "loss_weights": LossWeights,
    "metrics": MetricConventions,
}


def config_from_dict(raw) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    extra = set(raw) - known
    if extra:
        raise ValueError(f"unknown config keys {sorted(extra)}")
    if "schema_version" not in raw:
        raise ValueError("config needs a schema_version field")
    for key, cls in _NESTED.items():
        if key in raw and not isinstance(raw[key], cls):
            raw[key] = cls(**raw[key])
    if "denoiser" in raw:
        bad = set(raw["denoiser"]) & {"variant", "target_mode"}
        if bad:
            raise ValueError(f"denoiser.{sorted(bad)} are set per arm, not in the config")
    return ExperimentConfig(**raw)


def load_config(path) -> ExperimentConfig:
    return config_from_dict(yaml.safe_load(Path(path).read_text()))


def dump_config(cfg: ExperimentConfig):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
