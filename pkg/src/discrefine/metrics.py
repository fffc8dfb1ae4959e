"""Dice and 95th-percentile Hausdorff distance per tumor region.

HD95 conventions: boundary voxels are set members with at least one
face-adjacent non-member (the grid edge counts as outside); directed
distances run from each boundary voxel of one set to the nearest boundary
voxel of the other, in mm; the 95th percentile uses linear interpolation and
the result is the larger of the two directed percentiles.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import boundary_mask, distance_to_set

# the usual BraTS value for "one mask empty, the other not" (diagonal of 240x240x155 at 1 mm)
HD95_SENTINEL = 373.13
REPORT_REGIONS = ("WT", "ET", "TC")
_CHANNEL = {"WT": 0, "TC": 1, "ET": 2}


@dataclass(frozen=True)
class MetricConventions:
    empty_dice: float = 1.0
    hd95_sentinel: float = HD95_SENTINEL
    connectivity: int = 6
    percentile: float = 95.0
    percentile_method: str = "linear"

    def as_dict(self):
        return asdict(self)


DEFAULT_CONVENTIONS = MetricConventions()


def _as_bool(a):
    return np.asarray(a).astype(bool)


def dice(pred, gt, empty_value=1.0):
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return float(empty_value)
    return 2.0 * int(np.count_nonzero(p & g)) / denom


def directed_surface_distances(src, dst, spacing):
    """Distances (mm) from each boundary voxel of ``src`` to the boundary of ``dst``."""
    dist = distance_to_set(boundary_mask(dst), spacing)
    return dist[boundary_mask(src)]


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0), sentinel=HD95_SENTINEL, q=95.0):
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    p_any, g_any = p.any(), g.any()
    if not p_any and not g_any:
        return 0.0
    if not (p_any and g_any):
        return float(sentinel)
    d_pg = directed_surface_distances(p, g, spacing)
    d_gp = directed_surface_distances(g, p, spacing)
    return float(max(np.percentile(d_pg, q), np.percentile(d_gp, q)))


@dataclass
class CaseScores:
    dice: dict[str, float]
    hd95: dict[str, float]
    sentinel: dict[str, bool] = field(default_factory=dict)
    case_id: str = ""

    @property
    def dice_avg(self):
        return float(np.mean([self.dice[r] for r in REPORT_REGIONS]))

    @property
    def hd95_avg(self):
        return float(np.mean([self.hd95[r] for r in REPORT_REGIONS]))


def evaluate_case(pred, gt, spacing=None, conventions=DEFAULT_CONVENTIONS, case_id=""):
    """Per-region scores in table order (WT, ET, TC)."""
    pc = np.asarray(getattr(pred, "channels", pred))
    gc = np.asarray(getattr(gt, "channels", gt))
    if pc.shape != gc.shape:
        raise ValueError(f"shape mismatch {pc.shape} vs {gc.shape}")
    spacing = spacing or getattr(gt, "spacing", (1.0, 1.0, 1.0))
    d, h, s = {}, {}, {}
    for region in REPORT_REGIONS:
        ch = _CHANNEL[region]
        d[region] = dice(pc[ch], gc[ch], conventions.empty_dice)
        h[region] = hd95(pc[ch], gc[ch], spacing, conventions.hd95_sentinel, conventions.percentile)
        s[region] = bool(pc[ch].any()) != bool(gc[ch].any())
    return CaseScores(d, h, s, case_id)


def aggregate(scores):
    """Mean per region over cases; HD95 sentinels are left out and counted."""
    scores = list(scores)
    if not scores:
        raise ValueError("cannot aggregate an empty score list")
    out = {"n_cases": len(scores), "dice": {}, "hd95": {}, "hd95_excluded": {}}
    for region in REPORT_REGIONS:
        out["dice"][region] = float(np.mean([c.dice[region] for c in scores]))
        kept = [c.hd95[region] for c in scores if not c.sentinel.get(region, False)]
        out["hd95"][region] = float(np.mean(kept)) if kept else float("nan")
        out["hd95_excluded"][region] = len(scores) - len(kept)
    out["dice"]["Avg"] = float(np.mean([out["dice"][r] for r in REPORT_REGIONS]))
    out["hd95"]["Avg"] = float(np.mean([out["hd95"][r] for r in REPORT_REGIONS]))
    out["excluded_count"] = sum(out["hd95_excluded"].values())
    return out
