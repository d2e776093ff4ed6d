"""Temporal preprocessing of raw 4D CTA: perfusion window, frame picking, MIP.

The accumulated intensity curve q(t) sums every voxel of the frame at time t.
Contrast arrival makes q rise for several consecutive frames; washout makes it
stop rising. The perfusion window [start, end] brackets that bolus passage and
is detected from the sign pattern of the backward difference of q.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputValidationError

RISE_RUN = 5
N_FRAMES = 6


@dataclass(frozen=True)
class PerfusionWindow:
    """Detected bolus interval with bookkeeping about which rules fired.

    start_fell_back / end_fell_back record that the respective scan found no
    qualifying frame and the boundary defaulted to 0 / T-1. crossed records
    that the two rules produced start >= end and the window was reset to the
    full range.
    """

    start: int
    end: int
    n_frames: int
    start_fell_back: bool = False
    end_fell_back: bool = False
    crossed: bool = False

    @property
    def rule_derived(self) -> bool:
        return not (self.start_fell_back or self.end_fell_back or self.crossed)


def accumulated_intensity_curve(cta: np.ndarray) -> np.ndarray:
    """q(t): sum of all voxel intensities per frame, float64, shape (T,)."""
    cta = np.asarray(cta)
    if cta.ndim != 4:
        raise InputValidationError(f"expected a 4D T,Z,Y,X array, got shape {cta.shape}")
    return cta.reshape(cta.shape[0], -1).sum(axis=1, dtype=np.float64)


def detect_perfusion_window(curve: np.ndarray, run: int = RISE_RUN) -> PerfusionWindow:
    """Bracket the bolus passage in an accumulated intensity curve.

    Backward difference d(t) = q(t) - q(t-1) with d(0) = 0. A frame counts as
    rising iff d > 0 (ties are not rises). The window start is the earliest t
    such that frames t..t+run-1 all rise; the end is the latest t such that
    frames t-run+1..t all fail to rise. Either scan may find nothing, in which
    case that boundary falls back to the curve edge; if the two boundaries
    cross, the window resets to the full curve.
    """
    q = np.asarray(curve, dtype=np.float64)
    if q.ndim != 1:
        raise InputValidationError(f"curve must be 1D, got shape {q.shape}")
    n = q.shape[0]
    if n < run + 1:
        raise InputValidationError(f"curve has {n} frames; need at least {run + 1}")

    diff = np.zeros(n, dtype=np.float64)
    diff[1:] = q[1:] - q[:-1]
    rising = diff > 0

    start, start_fell_back = 0, True
    for t in range(0, n - run):
        if rising[t : t + run].all():
            start, start_fell_back = t, False
            break

    end, end_fell_back = n - 1, True
    for t in range(n - 1, run - 1, -1):
        if not rising[t - run + 1 : t + 1].any():
            end, end_fell_back = t, False
            break

    if start >= end:
        return PerfusionWindow(0, n - 1, n, start_fell_back, end_fell_back, crossed=True)
    return PerfusionWindow(start, end, n, start_fell_back, end_fell_back)


def frame_indices(window: PerfusionWindow, n_frames: int = N_FRAMES) -> list[int]:
    """Evenly spaced frame picks across the window, rounding half up.

    A degenerate window (start == end) repeats its single frame.
    """
    if n_frames < 2:
        raise InputValidationError(f"n_frames must be >= 2, got {n_frames}")
    span = window.end - window.start
    picks = []
    for k in range(n_frames):
        x = window.start + k * span / (n_frames - 1)
        picks.append(int(np.floor(x + 0.5)))
    return picks


def temporal_crop_downsample(
    cta: np.ndarray, window: PerfusionWindow, n_frames: int = N_FRAMES
) -> np.ndarray:
    """Select n_frames frames spanning the window: (T,Z,Y,X) -> (n_frames,Z,Y,X)."""
    cta = np.asarray(cta)
    if cta.ndim != 4:
        raise InputValidationError(f"expected a 4D T,Z,Y,X array, got shape {cta.shape}")
    if window.n_frames != cta.shape[0]:
        raise InputValidationError(
            f"window was detected on {window.n_frames} frames but sequence has {cta.shape[0]}"
        )
    return cta[frame_indices(window, n_frames)]


def temporal_mip(cta: np.ndarray) -> np.ndarray:
    """Maximum intensity projection over the full time axis: (T,Z,Y,X) -> (Z,Y,X)."""
    cta = np.asarray(cta)
    if cta.ndim != 4:
        raise InputValidationError(f"expected a 4D T,Z,Y,X array, got shape {cta.shape}")
    return cta.max(axis=0)


def normalize_intensity(volume: np.ndarray) -> np.ndarray:
    """Map intensities to [0,1]: (v - min) / (p99 - min), clipped.

    The 99th percentile uses linear interpolation. A volume whose 99th
    percentile equals its minimum (e.g. constant input) normalizes to all
    zeros with a warning.
    """
    volume = np.asarray(volume, dtype=np.float64)
    lo = float(volume.min())
    p99 = float(np.percentile(volume, 99))
    if p99 <= lo:
        warnings.warn("degenerate intensity range; output set to zeros", stacklevel=2)
        return np.zeros_like(volume, dtype=np.float32)
    out = (volume - lo) / (p99 - lo)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
