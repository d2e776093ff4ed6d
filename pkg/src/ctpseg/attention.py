"""Attention weight maps used by the synthesis and segmentation losses.

Each 2D slice gets a per-pixel weight: a flat high value inside the lesion and
a smoothly decaying value outside, driven by the Euclidean distance to the
nearest lesion pixel. Far from any lesion the weight settles at 0.5; right at
the boundary it approaches 1. Distances are in pixel units.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import InputValidationError

FG_WEIGHT = 1.5
DIST_SCALE = 50.0


def background_weight(distance, dist_scale: float = DIST_SCALE):
    """Weight for a background pixel at the given distance from the lesion.

    0.5 + sigmoid(-d/D) in a numerically direct form: exp(-d/D) never
    overflows for d >= 0.
    """
    distance = np.asarray(distance, dtype=np.float64)
    e = np.exp(-distance / dist_scale)
    return 0.5 + e / (e + 1.0)


def foreground_distances(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance (pixels, float64) to the nearest foreground pixel.

    Zero on foreground. The mask must be 2D and binary; it must contain at
    least one foreground pixel, otherwise no distance is defined.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InputValidationError(f"mask must be 2D, got shape {mask.shape}")
    if not np.all(np.isin(mask, (0, 1))):
        raise InputValidationError("mask must be binary (values 0 and 1 only)")
    fg = mask > 0.5
    if not fg.any():
        raise InputValidationError("mask has no foreground pixels")
    return ndimage.distance_transform_edt(~fg)


def compute_weight_map(
    mask: np.ndarray, fg_weight: float = FG_WEIGHT, dist_scale: float = DIST_SCALE
) -> np.ndarray:
    """Per-pixel weights for one 2D slice given its binary lesion mask.

    Foreground pixels get fg_weight. Background pixels get
    0.5 + exp(-d/D) / (exp(-d/D) + 1) where d is the exact Euclidean distance
    (in pixels) to the nearest foreground pixel. A slice with no foreground is
    uniformly 0.5.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InputValidationError(f"mask must be 2D, got shape {mask.shape}")
    if not np.all(np.isin(mask, (0, 1))):
        raise InputValidationError("mask must be binary (values 0 and 1 only)")
    fg = mask > 0.5
    if not fg.any():
        return np.full(mask.shape, 0.5, dtype=np.float32)
    out = background_weight(foreground_distances(mask), dist_scale)
    out[fg] = fg_weight
    return out.astype(np.float32)


def weight_volume(
    mask: np.ndarray, fg_weight: float = FG_WEIGHT, dist_scale: float = DIST_SCALE
) -> np.ndarray:
    """Stack per-slice weight maps for a (Z,Y,X) mask volume.

    Slices are independent: inter-slice spacing is large enough that the
    distance decay is computed in-plane only.
    """
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise InputValidationError(f"mask volume must be 3D, got shape {mask.shape}")
    return np.stack([compute_weight_map(sl, fg_weight, dist_scale) for sl in mask], axis=0)
