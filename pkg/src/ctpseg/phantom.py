"""Synthetic perfusion phantom: 4D CTA, analytic maps, DWI, lesion mask.

Each case is an elliptic brain with a smooth tissue-density field and one
ellipsoidal lesion. Voxel enhancement curves follow a gamma-variate bolus plus
a slow recirculation ramp; the lesion curve is delayed and damped. Perfusion
maps are computed analytically from the noise-free main bolus, so the usual
clinical orderings hold by construction: lesion CBF/CBV below healthy tissue,
lesion MTT/Tmax above.

The recirculation ramp is still rising at the last frame, which keeps the
detected perfusion window strictly inside the sequence: the tail frames rise,
so the window end lands at the washout/recirculation changeover.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InputValidationError
from .volume_io import CaseRecord, save_case, write_split


def gamma_variate(t: np.ndarray, onset: float, shape: float, scale: float) -> np.ndarray:
    """Gamma-variate bolus, normalized to peak 1 at onset + shape*scale."""
    t = np.asarray(t, dtype=np.float64)
    s = np.maximum(t - onset, 0.0)
    out = (s / (shape * scale)) ** shape * np.exp(shape - s / scale)
    return np.where(t > onset, out, 0.0)


@dataclass(frozen=True)
class PhantomSpec:
    """Knobs for one synthetic case; defaults are sized for desk-scale runs."""

    dims: tuple[int, int, int] = (4, 64, 64)
    spacing_mm: tuple[float, float, float] = (8.0, 1.0, 1.0)
    n_frames: int = 48
    n_lesions: int = 1
    bolus_onset: float = 8.0
    bolus_shape: float = 4.0
    bolus_scale: float = 2.5
    recirc_delay: float = 22.0
    recirc_shape: float = 3.0
    recirc_scale: float = 8.0
    recirc_amp: float = 0.3
    delay_shift: float = 3.0
    cbf_scale: float = 0.6
    lesion_radius: tuple[float, float] = (5.0, 11.0)
    tau_range: tuple[float, float] = (0.7, 1.3)
    baseline: float = 0.2
    baseline_texture: float = 0.1
    noise_sigma: float = 0.02
    dwi_noise_sigma: float = 0.01
    dwi_base: float = 0.2
    dwi_texture: float = 0.15
    dwi_lesion_contrast: float = 0.5
    brain_axes_frac: tuple[float, float] = (0.42, 0.45)

    def __post_init__(self):
        if self.n_frames < 2 or any(d < 1 for d in self.dims):
            raise InputValidationError("dims and n_frames must be positive")
        if self.n_lesions < 1:
            raise InputValidationError("n_lesions must be >= 1")
        if not (0 < self.cbf_scale < 1):
            raise InputValidationError("cbf_scale must lie in (0, 1)")
        if self.delay_shift <= 0:
            raise InputValidationError("delay_shift must be positive")


def brain_mask(spec: PhantomSpec) -> np.ndarray:
    """In-plane ellipse replicated across slices, bool (Z,Y,X)."""
    nz, ny, nx = spec.dims
    cy, cx = (ny - 1) / 2.0, (nx - 1) / 2.0
    ry = spec.brain_axes_frac[0] * (ny - 1)
    rx = spec.brain_axes_frac[1] * (nx - 1)
    yy, xx = np.mgrid[0:ny, 0:nx]
    ellipse = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return np.broadcast_to(ellipse, (nz, ny, nx)).copy()


def lesion_mask(
    spec: PhantomSpec, center: tuple[int, int, int], radius: float
) -> np.ndarray:
    """Ellipsoid with in-plane radius (voxels) and spacing-matched z extent."""
    rz = max(1, int(np.floor(radius * spec.spacing_mm[2] / spec.spacing_mm[0] + 0.5)))
    nz, ny, nx = spec.dims
    zz, yy, xx = np.mgrid[0:nz, 0:ny, 0:nx]
    cz, cy, cx = center
    d2 = ((zz - cz) / rz) ** 2 + ((yy - cy) / radius) ** 2 + ((xx - cx) / radius) ** 2
    return d2 <= 1.0


def _tissue_field(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-voxel density in [0,1]."""
    raw = rng.standard_normal(spec.dims)
    smooth = ndimage.gaussian_filter(raw, sigma=(0.5, 4.0, 4.0))
    lo, hi = smooth.min(), smooth.max()
    if hi <= lo:
        return np.full(spec.dims, 0.5)
    return (smooth - lo) / (hi - lo)


def _place_lesion(
    spec: PhantomSpec, brain: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    nz, ny, nx = spec.dims
    r_lo, r_hi = spec.lesion_radius
    for _ in range(100):
        radius = rng.uniform(r_lo, r_hi)
        center = (
            int(rng.integers(0, nz)),
            int(rng.integers(0, ny)),
            int(rng.integers(0, nx)),
        )
        lesion = lesion_mask(spec, center, radius)
        if lesion.any() and not (lesion & ~brain).any():
            return lesion
    raise InputValidationError(
        "could not place a lesion inside the brain ellipse; radius range too large"
    )


def _place_lesions(
    spec: PhantomSpec, brain: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    out = np.zeros(spec.dims, dtype=bool)
    for _ in range(spec.n_lesions):
        out |= _place_lesion(spec, brain, rng)
    return out


def _curves(spec: PhantomSpec) -> dict[str, np.ndarray]:
    t = np.arange(spec.n_frames, dtype=np.float64)
    main_h = gamma_variate(t, spec.bolus_onset, spec.bolus_shape, spec.bolus_scale)
    main_l = spec.cbf_scale * gamma_variate(
        t, spec.bolus_onset + spec.delay_shift, spec.bolus_shape, spec.bolus_scale
    )
    recirc_h = spec.recirc_amp * gamma_variate(
        t, spec.bolus_onset + spec.recirc_delay, spec.recirc_shape, spec.recirc_scale
    )
    recirc_l = spec.cbf_scale * spec.recirc_amp * gamma_variate(
        t,
        spec.bolus_onset + spec.delay_shift + spec.recirc_delay,
        spec.recirc_shape,
        spec.recirc_scale,
    )
    return {
        "main_h": main_h,
        "main_l": main_l,
        "full_h": main_h + recirc_h,
        "full_l": main_l + recirc_l,
    }


def _class_kinetics(spec: PhantomSpec) -> dict[str, float]:
    """Per-class perfusion numbers from the noise-free main bolus."""
    c = _curves(spec)
    t = np.arange(spec.n_frames, dtype=np.float64)
    out: dict[str, float] = {}
    for tag in ("h", "l"):
        main = c[f"main_{tag}"]
        area = float(main.sum())
        centroid = float((t * main).sum() / area)
        out[f"area_{tag}"] = area
        out[f"mtt_{tag}"] = centroid - spec.bolus_onset
    peak_h = int(np.argmax(c["full_h"]))
    out["tmax_h"] = 0.0
    out["tmax_l"] = float(int(np.argmax(c["full_l"])) - peak_h)
    return out


def generate_case(spec: PhantomSpec, rng: np.random.Generator, case_id: str) -> CaseRecord:
    """Build one complete synthetic case (CTA, maps, DWI, mask)."""
    brain = brain_mask(spec)
    lesion = _place_lesions(spec, brain, rng)
    tau_hat = _tissue_field(spec, rng)
    tau = spec.tau_range[0] + (spec.tau_range[1] - spec.tau_range[0]) * tau_hat

    kin = _class_kinetics(spec)
    healthy = brain & ~lesion
    cbv = np.zeros(spec.dims)
    cbv[healthy] = (tau * kin["area_h"])[healthy]
    cbv[lesion] = (tau * kin["area_l"])[lesion]
    mtt = np.zeros(spec.dims)
    mtt[healthy] = kin["mtt_h"]
    mtt[lesion] = kin["mtt_l"]
    tmax = np.zeros(spec.dims)
    tmax[lesion] = kin["tmax_l"]
    cbf = np.zeros(spec.dims)
    cbf[brain] = cbv[brain] / mtt[brain]

    curves = _curves(spec)
    baseline_field = (spec.baseline + spec.baseline_texture * tau_hat) * brain
    enh_h = (tau * healthy).astype(np.float64)
    enh_l = (tau * lesion).astype(np.float64)
    cta = (
        baseline_field[None]
        + curves["full_h"][:, None, None, None] * enh_h[None]
        + curves["full_l"][:, None, None, None] * enh_l[None]
    )
    cta = cta + rng.normal(0.0, spec.noise_sigma, cta.shape)

    dwi = (spec.dwi_base + spec.dwi_texture * tau_hat) * brain
    dwi = dwi + spec.dwi_lesion_contrast * lesion
    dwi = dwi + rng.normal(0.0, spec.dwi_noise_sigma, dwi.shape)
    dwi = np.clip(dwi, 0.0, 1.0)

    return CaseRecord(
        case_id=case_id,
        cbf=cbf.astype(np.float32),
        cbv=cbv.astype(np.float32),
        mtt=mtt.astype(np.float32),
        tmax=tmax.astype(np.float32),
        spacing_mm=spec.spacing_mm,
        cta=cta.astype(np.float32),
        dwi=dwi.astype(np.float32),
        mask=lesion.astype(np.float32),
    )


def split_sizes(n_cases: int) -> tuple[int, int, int]:
    """80/10/10 with at least one case per role; train takes the remainder."""
    if n_cases < 3:
        raise InputValidationError(f"need at least 3 cases to split, got {n_cases}")
    n_val = max(1, int(np.floor(0.1 * n_cases + 0.5)))
    n_test = max(1, int(np.floor(0.1 * n_cases + 0.5)))
    n_train = n_cases - n_val - n_test
    if n_train < 1:
        raise InputValidationError(f"split leaves no training cases for n={n_cases}")
    return n_train, n_val, n_test


def generate_corpus(
    root, n_cases: int, seed: int, spec: PhantomSpec | None = None
) -> list[str]:
    """Write n_cases cases plus a split file under root; fully seed-determined.

    Case i depends only on (seed, i), so a prefix of a larger corpus matches a
    smaller one generated with the same seed.
    """
    spec = spec or PhantomSpec()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_cases)
    case_ids = []
    for i, child in enumerate(children):
        case_id = f"case_{i:04d}"
        record = generate_case(spec, np.random.default_rng(child), case_id)
        save_case(root / case_id, record)
        case_ids.append(case_id)
    n_train, n_val, _ = split_sizes(n_cases)
    assignment = {}
    for i, case_id in enumerate(case_ids):
        if i < n_train:
            assignment[case_id] = "train"
        elif i < n_train + n_val:
            assignment[case_id] = "val"
        else:
            assignment[case_id] = "test"
    write_split(root / "split.txt", assignment)
    return case_ids
