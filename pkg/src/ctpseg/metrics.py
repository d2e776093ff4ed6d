"""Evaluation metrics: overlap, surface distances, volumes, image similarity.

Surface metrics work on the set of foreground voxels exposed under
6-connectivity (a voxel with any face-neighbor outside the mask, counting
out-of-bounds as outside), converted to physical coordinates via the voxel
spacing. Image similarity assumes intensities in [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import UndefinedMetricError

SSIM_WINDOW = 7
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4

SMALL_MAX_CC = 10.0
LARGE_MIN_CC = 50.0


def _as_bool(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask) > 0.5


def dice_precision_recall(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """Overlap scores from voxel counts.

    Two empty masks agree perfectly (all three = 1); if exactly one is empty
    there is no overlap at all (all three = 0).
    """
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise UndefinedMetricError(f"shape mismatch {p.shape} vs {g.shape}")
    tp = float(np.logical_and(p, g).sum())
    fp = float(np.logical_and(p, ~g).sum())
    fn = float(np.logical_and(~p, g).sum())
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    if tp == 0:
        return 0.0, 0.0, 0.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp), tp / (tp + fn)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices (K,3) of foreground voxels with an exposed face, 6-connectivity."""
    m = _as_bool(mask)
    if m.ndim != 3:
        raise UndefinedMetricError(f"mask must be 3D, got shape {m.shape}")
    structure = ndimage.generate_binary_structure(3, 1)
    eroded = ndimage.binary_erosion(m, structure=structure, border_value=0)
    return np.argwhere(m & ~eroded)


def _surface_points_mm(mask: np.ndarray, spacing_mm) -> np.ndarray:
    pts = surface_voxels(mask)
    return pts * np.asarray(spacing_mm, dtype=np.float64)


def hausdorff_distance(pred: np.ndarray, gt: np.ndarray, spacing_mm) -> float:
    """Symmetric Hausdorff distance between exposed surfaces, in mm."""
    a = _surface_points_mm(pred, spacing_mm)
    b = _surface_points_mm(gt, spacing_mm)
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError("hausdorff undefined for an empty mask")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float(max(d_ab.max(), d_ba.max()))


def assd(pred: np.ndarray, gt: np.ndarray, spacing_mm) -> float:
    """Average symmetric surface distance in mm: all point-to-set distances pooled."""
    a = _surface_points_mm(pred, spacing_mm)
    b = _surface_points_mm(gt, spacing_mm)
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError("assd undefined for an empty mask")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float((d_ab.sum() + d_ba.sum()) / (len(a) + len(b)))


def lesion_volume_cc(mask: np.ndarray, spacing_mm) -> float:
    """Foreground volume in cubic centimeters."""
    voxel_mm3 = float(np.prod(np.asarray(spacing_mm, dtype=np.float64)))
    return float(_as_bool(mask).sum()) * voxel_mm3 / 1000.0


def relative_volume_error(pred: np.ndarray, gt: np.ndarray, spacing_mm) -> float:
    """|V_gt - V_pred| / V_gt."""
    v_gt = lesion_volume_cc(gt, spacing_mm)
    if v_gt == 0:
        raise UndefinedMetricError("relative volume error undefined for empty ground truth")
    v_pred = lesion_volume_cc(pred, spacing_mm)
    return abs(v_gt - v_pred) / v_gt


def bucket_of_volume(volume_cc: float) -> str:
    """small < 10 CC, medium 10-50 CC, large > 50 CC."""
    if volume_cc < SMALL_MAX_CC:
        return "small"
    if volume_cc > LARGE_MIN_CC:
        return "large"
    return "medium"


def size_bucket(gt: np.ndarray, spacing_mm) -> str:
    if not _as_bool(gt).any():
        raise UndefinedMetricError("size bucket undefined for empty ground truth")
    return bucket_of_volume(lesion_volume_cc(gt, spacing_mm))


def _ssim_slice(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all complete 7x7 windows of one 2D slice."""
    half = SSIM_WINDOW // 2
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise UndefinedMetricError(f"slice {a.shape} smaller than the SSIM window")
    a = a.astype(np.float64)
    b = b.astype(np.float64)

    def valid_mean(x):
        out = ndimage.uniform_filter(x, size=SSIM_WINDOW, mode="constant")
        return out[half:-half, half:-half]

    mu_a, mu_b = valid_mean(a), valid_mean(b)
    var_a = valid_mean(a * a) - mu_a**2
    var_b = valid_mean(b * b) - mu_b**2
    cov = valid_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def ssim(a: np.ndarray, b: np.ndarray, region: tuple | None = None) -> float:
    """Volume SSIM: mean of per-slice SSIMs, slices along axis 0.

    region, when given, is a tuple of slice objects restricting both volumes.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 3:
        raise UndefinedMetricError(f"need matching 3D volumes, got {a.shape} vs {b.shape}")
    if region is not None:
        a, b = a[region], b[region]
        if a.size == 0:
            raise UndefinedMetricError("empty region")
    return float(np.mean([_ssim_slice(sa, sb) for sa, sb in zip(a, b)]))


def local_region(gt_mask: np.ndarray, margin_plane: int = 5, margin_z: int = 1) -> tuple:
    """Slices for the GT bounding box dilated in-plane and along z, clipped to bounds."""
    m = _as_bool(gt_mask)
    if not m.any():
        raise UndefinedMetricError("local region undefined for empty ground truth")
    idx = np.argwhere(m)
    lo = idx.min(axis=0)
    hi = idx.max(axis=0) + 1
    margins = (margin_z, margin_plane, margin_plane)
    return tuple(
        slice(max(0, lo[i] - margins[i]), min(m.shape[i], hi[i] + margins[i]))
        for i in range(3)
    )


def local_ssim(a: np.ndarray, b: np.ndarray, gt_mask: np.ndarray) -> float:
    """SSIM restricted to the neighborhood of the ground-truth lesion."""
    return ssim(a, b, region=local_region(gt_mask))


def psnr(a: np.ndarray, b: np.ndarray, region: tuple | None = None) -> float:
    """Peak signal-to-noise ratio for data range 1; identical inputs give inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UndefinedMetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if region is not None:
        a, b = a[region], b[region]
        if a.size == 0:
            raise UndefinedMetricError("empty region")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


METRIC_COLUMNS = (
    "dice",
    "precision",
    "recall",
    "hd_mm",
    "assd_mm",
    "rve",
    "ssim_global",
    "ssim_local",
    "psnr_global",
    "psnr_local",
    "lesion_volume_cc",
)


def evaluate_case(
    pred_mask: np.ndarray,
    gt_mask: np.ndarray,
    spacing_mm,
    pseudo_dwi: np.ndarray | None = None,
    real_dwi: np.ndarray | None = None,
) -> dict:
    """All metrics for one case; undefined ones are recorded as absent, not raised."""
    row: dict = {}
    notes = []

    def guarded(name, fn):
        try:
            row[name] = fn()
        except UndefinedMetricError as exc:
            row[name] = None
            notes.append(f"{name}: {exc}")

    dice, precision, recall = dice_precision_recall(pred_mask, gt_mask)
    row.update(dice=dice, precision=precision, recall=recall)
    guarded("hd_mm", lambda: hausdorff_distance(pred_mask, gt_mask, spacing_mm))
    guarded("assd_mm", lambda: assd(pred_mask, gt_mask, spacing_mm))
    guarded("rve", lambda: relative_volume_error(pred_mask, gt_mask, spacing_mm))
    row["lesion_volume_cc"] = lesion_volume_cc(gt_mask, spacing_mm)
    guarded("size_bucket", lambda: size_bucket(gt_mask, spacing_mm))
    if pseudo_dwi is not None and real_dwi is not None:
        guarded("ssim_global", lambda: ssim(pseudo_dwi, real_dwi))
        guarded("psnr_global", lambda: psnr(pseudo_dwi, real_dwi))
        guarded("ssim_local", lambda: local_ssim(pseudo_dwi, real_dwi, gt_mask))
        guarded(
            "psnr_local", lambda: psnr(pseudo_dwi, real_dwi, region=local_region(gt_mask))
        )
    else:
        row.update(ssim_global=None, ssim_local=None, psnr_global=None, psnr_local=None)
    row["notes"] = "; ".join(notes)
    return row


@dataclass
class MetricsReport:
    """Per-case metric rows plus aggregation and serialization."""

    rows: dict[str, dict] = field(default_factory=dict)

    def add(self, case_id: str, row: dict) -> None:
        self.rows[case_id] = row

    def _values(self, column: str, bucket: str | None) -> list[float]:
        return [
            r[column]
            for r in self.rows.values()
            if r.get(column) is not None
            and math.isfinite(r[column])
            and (bucket is None or r.get("size_bucket") == bucket)
        ]

    def mean_std(self, column: str, bucket: str | None = None) -> tuple[float, float] | None:
        values = self._values(column, bucket)
        if not values:
            return None
        return float(np.mean(values)), float(np.std(values))

    def aggregate(self) -> dict:
        """mean/std per metric, overall and per size bucket."""
        out: dict = {"n_cases": len(self.rows)}
        for scope in (None, "small", "medium", "large"):
            prefix = "overall" if scope is None else scope
            block = {}
            for column in METRIC_COLUMNS:
                ms = self.mean_std(column, scope)
                if ms is not None:
                    block[column] = {"mean": ms[0], "std": ms[1]}
            block["n_cases"] = len(
                [r for r in self.rows.values() if scope is None or r.get("size_bucket") == scope]
            )
            out[prefix] = block
        return out

    def write_csv(self, path) -> None:
        columns = ["case_id", *METRIC_COLUMNS, "size_bucket", "notes"]
        lines = [",".join(columns)]
        for case_id, row in sorted(self.rows.items()):
            cells = [case_id]
            for column in columns[1:]:
                value = row.get(column)
                if value is None:
                    cells.append("")
                elif isinstance(value, float):
                    cells.append(f"{value:.6g}")
                else:
                    cells.append(str(value))
            lines.append(",".join(cells))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def write_json(self, path) -> None:
        doc = {"cases": self.rows, "aggregate": self.aggregate()}

        def default(obj):
            if isinstance(obj, (np.floating, np.integer)):
                return obj.item()
            raise TypeError(f"not serializable: {type(obj)}")

        Path(path).write_text(
            json.dumps(doc, indent=2, default=default) + "\n", encoding="utf-8"
        )
