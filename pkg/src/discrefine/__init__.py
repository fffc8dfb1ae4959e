"""Discrepancy-modeling diffusion refinement for 3D tumor segmentation."""
from ._accel import USE_NUMBA, backend_name
from .discrepancy import DiscrepancyMask, apply_correction, binarize_discrepancy, discrepancy_target
from .metrics import CaseScores, aggregate, dice, evaluate_case, hd95
from .phantom import (
    DisjointLabelMap,
    MultiContrastVolume,
    PhantomSpec,
    RegionMask,
    from_regions,
    generate_phantom,
    to_regions,
    znorm_rescale,
)

__version__ = "0.1.0"
