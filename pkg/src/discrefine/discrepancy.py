"""Discrepancy targets and the voxel-flip correction.

A discrepancy mask marks every voxel where the baseline's binary region mask
disagrees with ground truth. Correcting the baseline with an estimated
discrepancy flips exactly the marked voxels: ``|u - d|`` on bits is XOR.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .phantom import RegionMask


@dataclass
class DiscrepancyMask:
    channels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = _bits(self.channels, "discrepancy")
        self.spacing = tuple(float(s) for s in self.spacing)


def _bits(x, name):
    arr = np.asarray(getattr(x, "channels", x))
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} mask must be binary")
    return arr.astype(np.uint8, copy=False)


def _pair(a, b, names):
    a = _bits(a, names[0])
    b = _bits(b, names[1])
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")
    return a, b


def discrepancy_target(upred, gt, provenance=None) -> DiscrepancyMask:
    u, g = _pair(upred, gt, ("baseline", "ground-truth"))
    delta = np.abs(u.astype(np.int16) - g.astype(np.int16)).astype(np.uint8)
    return DiscrepancyMask(delta, getattr(upred, "spacing", (1.0, 1.0, 1.0)), dict(provenance or {}))


def apply_correction(upred, delta_hat) -> RegionMask:
    """Flip the baseline bits wherever ``delta_hat`` is 1."""
    u, d = _pair(upred, delta_hat, ("baseline", "discrepancy"))
    out = np.abs(u.astype(np.int16) - d.astype(np.int16)).astype(np.uint8)
    return RegionMask(out, getattr(upred, "spacing", (1.0, 1.0, 1.0)))


def binarize_discrepancy(soft_delta, threshold=0.5, spacing=None) -> DiscrepancyMask:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie strictly between 0 and 1")
    probs = np.asarray(getattr(soft_delta, "probs", soft_delta))
    spacing = spacing or getattr(soft_delta, "spacing", (1.0, 1.0, 1.0))
    return DiscrepancyMask((probs >= threshold).astype(np.uint8), spacing)
