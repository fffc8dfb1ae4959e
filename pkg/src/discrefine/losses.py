"""Compound segmentation loss: smoothed soft Dice + BCE + MSE."""
from __future__ import annotations

from dataclasses import dataclass

import torch

DICE_SMOOTH = 1e-5
# log clamp for BCE on probabilities
BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    dice: float = 1.0
    bce: float = 1.0
    mse: float = 1.0


def soft_dice_loss(pred, target, smooth=DICE_SMOOTH):
    """Per-channel ``1 - (2 sum(pt) + s) / (sum(p) + sum(t) + s)``, averaged.

    ``pred``/``target`` are (C, ...) or (B, C, ...); channel axis is -4.
    """
    dims = tuple(range(pred.ndim - 3, pred.ndim))
    inter = (pred * target).sum(dims)
    denom = pred.sum(dims) + target.sum(dims)
    return (1 - (2 * inter + smooth) / (denom + smooth)).mean()


def compound_loss(pred, target, weights=LossWeights(), return_parts=False):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    with torch.no_grad():
        if pred.min() < 0 or pred.max() > 1 or not torch.isfinite(pred).all():
            raise ValueError("pred must be probabilities in [0, 1]")
    target = target.to(pred.dtype)
    parts = {}
    parts["dice"] = soft_dice_loss(pred, target)
    p = pred.clamp(BCE_EPS, 1 - BCE_EPS)
    parts["bce"] = -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()
    parts["mse"] = ((pred - target) ** 2).mean()
    total = weights.dice * parts["dice"] + weights.bce * parts["bce"] + weights.mse * parts["mse"]
    if return_parts:
        return total, {k: float(v) for k, v in parts.items()}
    return total
