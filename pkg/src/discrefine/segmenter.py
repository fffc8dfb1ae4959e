"""Baseline 3D U-Net segmenter producing per-region probabilities (WT, TC, ET)."""
from __future__ import annotations

import contextlib
import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .losses import LossWeights, compound_loss
from .nets import Decoder, Encoder, level_widths
from .phantom import MultiContrastVolume, RegionMask

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SegmenterConfig:
    levels: int = 3
    base_width: int = 8
    in_channels: int = 4
    out_channels: int = 3
    activation: str = "leaky_relu"
    normalization: str = "instance"

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")

    @property
    def divisor(self):
        return 2 ** (self.levels - 1)

    def check_spatial(self, shape):
        bad = [d for d in shape if d % self.divisor]
        if bad:
            raise ValueError(f"spatial dims {tuple(shape)} must be divisible by {self.divisor} for {self.levels} levels")


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    deterministic: bool = True
    loss: LossWeights = field(default_factory=lambda: LossWeights(dice=1.0, bce=1.0, mse=0.0))


@dataclass
class SoftPrediction:
    probs: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


class UNet3D(nn.Module):
    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.config = cfg
        widths = level_widths(cfg.levels, cfg.base_width)
        self.encoder = Encoder(cfg.in_channels, widths, cfg.normalization, cfg.activation)
        self.decoder = Decoder(widths, cfg.out_channels, cfg.normalization, cfg.activation)
        self.training_fingerprint = {}

    def forward(self, x):
        self.config.check_spatial(x.shape[-3:])
        if x.shape[-4] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[-4]}")
        return self.decoder(self.encoder(x))


def build_segmenter(cfg: SegmenterConfig, seed: int) -> UNet3D:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNet3D(cfg)
    model.training_fingerprint = {"init_seed": int(seed)}
    return model


@contextlib.contextmanager
def deterministic_mode(enabled=True):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def _param_dtype(model):
    return next(model.parameters()).dtype


def predict(model: UNet3D, vol: MultiContrastVolume) -> SoftPrediction:
    data = np.asarray(vol.data)
    if data.shape[0] != model.config.in_channels:
        raise ValueError(f"volume has {data.shape[0]} channels, model expects {model.config.in_channels}")
    model.config.check_spatial(data.shape[1:])
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.as_tensor(data, dtype=_param_dtype(model))[None]
            probs = torch.sigmoid(model(x))[0]
    finally:
        model.train(was_training)
    return SoftPrediction(probs.float().numpy(), vol.spacing)


def binarize(pred: SoftPrediction, threshold=0.5) -> RegionMask:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie strictly between 0 and 1")
    return RegionMask((np.asarray(pred.probs) >= threshold).astype(np.uint8), pred.spacing)


def dataset_checksum(cases):
    h = hashlib.sha256()
    for vol, target in cases:
        h.update(np.ascontiguousarray(vol.data, dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(getattr(target, "channels", target), dtype=np.uint8).tobytes())
    return h.hexdigest()[:16]


def train_segmenter(model: UNet3D, dataset, hyper: TrainConfig):
    """Fit ``model`` on ``(volume, RegionMask)`` pairs with Dice + BCE and AdamW.

    One optimiser step per case, cases reshuffled every epoch. Returns
    ``(model, per_epoch_mean_loss)``.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training set")
    dtype = _param_dtype(model)
    xs = [torch.as_tensor(np.asarray(v.data), dtype=dtype)[None] for v, _ in dataset]
    ys = [torch.as_tensor(np.asarray(getattr(m, "channels", m)), dtype=dtype)[None] for _, m in dataset]
    opt = torch.optim.AdamW(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    rng = np.random.default_rng(hyper.seed)
    trace = []
    model.train()
    with deterministic_mode(hyper.deterministic):
        for epoch in range(hyper.epochs):
            losses = []
            for step, idx in enumerate(rng.permutation(len(dataset))):
                probs = torch.sigmoid(model(xs[idx]))
                loss = compound_loss(probs, ys[idx], hyper.loss)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step} (case index {idx})")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(loss.item())
            trace.append(float(np.mean(losses)))
            log.info("segmenter epoch %d loss %.5f", epoch, trace[-1])
    model.eval()
    model.training_fingerprint = {
        "init_seed": model.training_fingerprint.get("init_seed"),
        "train_seed": int(hyper.seed),
        "data_checksum": dataset_checksum(dataset),
        "epochs": int(model.training_fingerprint.get("epochs", 0)) + hyper.epochs,
    }
    return model, trace


def save_segmenter(model: UNet3D, path, extra=None):
    torch.save(
        {
            "kind": "segmenter",
            "config": asdict(model.config),
            "state_dict": model.state_dict(),
            "training_fingerprint": model.training_fingerprint,
            **(extra or {}),
        },
        path,
    )


def segmenter_from_state(ckpt) -> UNet3D:
    model = UNet3D(SegmenterConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.training_fingerprint = dict(ckpt.get("training_fingerprint", {}))
    model.eval()
    return model


def load_segmenter(path) -> UNet3D:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "segmenter":
        raise ValueError(f"{path} is not a segmenter checkpoint")
    return segmenter_from_state(ckpt)
