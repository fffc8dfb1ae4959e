"""Synthetic multi-contrast tumor phantoms, intensity preprocessing and label
scheme conversion.

Label codes follow the BraTS convention used throughout the package::

    0 background, 1 necrotic core (NCR), 2 edema (ED), 3 enhancing tumor (ET)

Region masks are stacked in the order (WT, TC, ET).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

NCR, ED, ET = 1, 2, 3
REGIONS = ("WT", "TC", "ET")
CONTRASTS = ("T1", "T1Gd", "T2", "FLAIR")


class ConstantChannelError(ValueError):
    """A channel has no foreground variance, so it cannot be Z-scored."""


@dataclass
class MultiContrastVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict[str, Any] = field(default_factory=dict)
    # per-channel nonzero support of the raw intensities, kept after rescaling
    foreground: np.ndarray | None = None

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 4:
            raise ValueError(f"expected a (4, D, W, H) volume, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3:
            raise ValueError("spacing needs one value per spatial axis")

    @property
    def shape(self):
        return self.data.shape[1:]


@dataclass
class DisjointLabelMap:
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise ValueError(f"expected a 3D label grid, got {self.labels.shape}")
        if not np.isin(self.labels, (0, NCR, ED, ET)).all():
            raise ValueError("label codes must be in {0, 1, 2, 3}")
        self.spacing = tuple(float(s) for s in self.spacing)


@dataclass
class RegionMask:
    channels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.channels.ndim != 4 or self.channels.shape[0] != 3:
            raise ValueError(f"expected a (3, D, W, H) region mask, got {self.channels.shape}")
        if not np.isin(self.channels, (0, 1)).all():
            raise ValueError("region masks must be binary")
        self.channels = self.channels.astype(np.uint8, copy=False)
        self.spacing = tuple(float(s) for s in self.spacing)

    def nesting_violations(self):
        """Number of voxels where ET <= TC <= WT does not hold."""
        wt, tc, et = self.channels.astype(bool)
        return int(np.count_nonzero((et & ~tc) | (tc & ~wt)))


@dataclass(frozen=True)
class ContrastProfile:
    """Mean intensity per tissue class plus smooth texture amplitude."""

    tissue: float
    ncr: float
    ed: float
    et: float
    texture: float = 0.05


DEFAULT_PROFILES = (
    ContrastProfile(tissue=0.60, ncr=0.25, ed=0.50, et=0.70),  # T1
    ContrastProfile(tissue=0.55, ncr=0.20, ed=0.50, et=1.00),  # T1Gd
    ContrastProfile(tissue=0.45, ncr=0.95, ed=0.80, et=0.60),  # T2
    ContrastProfile(tissue=0.40, ncr=0.55, ed=0.95, et=0.70),  # FLAIR
)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    tumor_count: int = 1
    # outer radius interval (mm) of each nested sub-region, innermost first
    radius_range: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {"ncr": (1.5, 3.0), "et": (3.5, 5.0), "ed": (5.5, 8.0)}
    )
    contrast_profiles: tuple[ContrastProfile, ...] = DEFAULT_PROFILES
    noise_sigma: float = 0.03
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    encoder_depth: int = 3
    deformation: float = 0.25

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=int(seed))

    def validate(self):
        if len(self.dims) != 3:
            raise ValueError("dims must have three entries")
        div = 2 ** self.encoder_depth
        for d in self.dims:
            if d < 16 or d % div:
                raise ValueError(f"each dim must be >= 16 and divisible by {div}, got {self.dims}")
        if self.tumor_count < 1:
            raise ValueError("tumor_count must be >= 1")
        if len(self.contrast_profiles) != 4:
            raise ValueError("need exactly four contrast profiles")
        try:
            ranges = [tuple(map(float, self.radius_range[k])) for k in ("ncr", "et", "ed")]
        except KeyError as exc:
            raise ValueError(f"radius_range is missing {exc}") from None
        lo_prev = 0.0
        hi_prev = 0.0
        for lo, hi in ranges:
            if not 0 < lo <= hi:
                raise ValueError(f"bad radius interval {(lo, hi)}")
            if lo < hi_prev or lo <= lo_prev:
                raise ValueError("radius intervals must be ordered ncr < et < ed without overlap")
            lo_prev, hi_prev = lo, hi
        # the deformed outer shell plus a margin must fit inside the brain ellipsoid
        extent = min(d * s for d, s in zip(self.dims, self.spacing))
        if 2 * ranges[-1][1] * (1 + self.deformation) + 4 * max(self.spacing) > 0.8 * extent:
            raise ValueError(f"radius_range {ranges[-1]} does not fit inside dims {self.dims}")


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def generate_phantom(spec: PhantomSpec):
    """Build one deterministic (volume, labels) pair from ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(d) for d in spec.dims)
    sp = np.asarray(spec.spacing, dtype=np.float64)
    coords = np.stack(np.meshgrid(*[np.arange(n) * s for n, s in zip(shape, sp)], indexing="ij"))
    centre = (np.asarray(shape) - 1) * sp / 2

    # brain: a slightly deformed ellipsoid filling most of the grid
    semi = centre * rng.uniform(0.85, 0.95, size=3)
    r_brain = np.sqrt((((coords - centre[:, None, None, None]) / semi[:, None, None, None]) ** 2).sum(0))
    r_brain = r_brain * (1 + 0.05 * _smooth_field(rng, shape, 4.0))
    brain = r_brain < 1.0

    rr = spec.radius_range
    rank = np.zeros(shape, dtype=np.int8)  # 0 bg, 1 ED, 2 ET, 3 NCR (innermost wins)
    for _ in range(spec.tumor_count):
        r_ncr = rng.uniform(*rr["ncr"])
        r_et = rng.uniform(*rr["et"])
        r_ed = rng.uniform(*rr["ed"])
        axes = rng.uniform(0.8, 1.2, size=3)
        rot, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        reach = r_ed * (1 + spec.deformation) * axes.max() + 2 * sp.max()
        slack = 0.6 * np.clip(semi - reach, 0.0, None)
        c = centre + rng.uniform(-1.0, 1.0, size=3) * slack
        rel = np.tensordot(rot.T, coords - c[:, None, None, None], axes=1) / axes[:, None, None, None]
        dist = np.sqrt((rel**2).sum(0))
        dist = dist * (1 + spec.deformation * _smooth_field(rng, shape, 3.0))
        rank = np.maximum(rank, np.where(dist < r_ncr, 3, np.where(dist < r_et, 2, np.where(dist < r_ed, 1, 0))))
    rank = np.where(brain, rank, 0)
    labels = np.choose(rank, [0, ED, ET, NCR]).astype(np.uint8)
    for code in (NCR, ED, ET):
        if not (labels == code).any():
            raise RuntimeError(f"phantom seed {spec.seed} lacks label {code}; widen radius_range")

    data = np.zeros((4, *shape), dtype=np.float32)
    for ch, prof in enumerate(spec.contrast_profiles):
        lut = np.array([prof.tissue, prof.ncr, prof.ed, prof.et])
        img = lut[labels] * (1 + prof.texture * _smooth_field(rng, shape, 2.0))
        img = img + spec.noise_sigma * rng.standard_normal(shape)
        data[ch] = np.where(brain, np.clip(img, 1e-3, None), 0.0)

    meta = {
        "seed": int(spec.seed),
        "generator": "phantom",
        "dims": list(shape),
        "tumor_count": int(spec.tumor_count),
        "radius_range": {k: list(v) for k, v in rr.items()},
        "noise_sigma": float(spec.noise_sigma),
    }
    vol = MultiContrastVolume(data, tuple(spec.spacing), meta, foreground=data != 0)
    return vol, DisjointLabelMap(labels, tuple(spec.spacing))


def zscore_foreground(vol: MultiContrastVolume):
    """Per-channel Z-score over the nonzero voxels; returns (zscored, foreground).

    Background voxels are left at exactly 0.
    """
    data = np.asarray(vol.data, dtype=np.float64)
    fg = data != 0
    out = np.zeros_like(data)
    for ch in range(data.shape[0]):
        vals = data[ch][fg[ch]]
        std = vals.std() if vals.size else 0.0
        if vals.size == 0 or not std > 0:
            raise ConstantChannelError(f"channel {ch} has zero foreground variance")
        out[ch][fg[ch]] = (vals - vals.mean()) / std
    return out, fg


def znorm_rescale(vol: MultiContrastVolume) -> MultiContrastVolume:
    """Z-score each channel over its foreground, then min-max it to [0, 1].

    Background stays 0; use the returned volume's ``foreground`` to tell it
    apart from the foreground minimum.
    """
    z, fg = zscore_foreground(vol)
    out = np.zeros_like(z)
    for ch in range(z.shape[0]):
        vals = z[ch][fg[ch]]
        lo, hi = vals.min(), vals.max()
        out[ch][fg[ch]] = (vals - lo) / (hi - lo)
    if not np.isfinite(out).all():
        raise ValueError("non-finite values after normalisation")
    meta = dict(vol.meta, preprocessed="zscore+minmax")
    return MultiContrastVolume(out.astype(np.float32), vol.spacing, meta, foreground=fg)


def to_regions(labels: DisjointLabelMap) -> RegionMask:
    lab = labels.labels
    wt = lab > 0
    tc = (lab == NCR) | (lab == ET)
    et = lab == ET
    return RegionMask(np.stack([wt, tc, et]).astype(np.uint8), labels.spacing)


def from_regions(mask: RegionMask):
    """Collapse (WT, TC, ET) to disjoint codes by precedence ET > TC > WT.

    Returns ``(labels, violations)`` where ``violations`` counts voxels whose
    channels break ET <= TC <= WT.
    """
    wt, tc, et = mask.channels.astype(bool)
    labels = np.zeros(wt.shape, dtype=np.uint8)
    labels[wt] = ED
    labels[tc] = NCR
    labels[et] = ET
    return DisjointLabelMap(labels, mask.spacing), mask.nesting_violations()
