import json
import math

import numpy as np
import pytest

from ctpseg import metrics
from ctpseg.errors import UndefinedMetricError


def rand_mask(rng, shape=(4, 8, 8), density=0.8):
    return (rng.random(shape) > density).astype(np.float32)


def brute_force_surface(mask):
    m = np.asarray(mask) > 0.5
    out = []
    nz, ny, nx = m.shape
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not m[z, y, x]:
                    continue
                exposed = False
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    zz, yy, xx = z + dz, y + dy, x + dx
                    if not (0 <= zz < nz and 0 <= yy < ny and 0 <= xx < nx):
                        exposed = True
                    elif not m[zz, yy, xx]:
                        exposed = True
                if exposed:
                    out.append((z, y, x))
    return np.array(out).reshape(-1, 3)


def brute_force_distances(pred, gt, spacing):
    a = brute_force_surface(pred) * np.asarray(spacing)
    b = brute_force_surface(gt) * np.asarray(spacing)
    d_ab = np.array([np.sqrt(((b - p) ** 2).sum(axis=1)).min() for p in a])
    d_ba = np.array([np.sqrt(((a - q) ** 2).sum(axis=1)).min() for q in b])
    hd = max(d_ab.max(), d_ba.max())
    assd = (d_ab.sum() + d_ba.sum()) / (len(a) + len(b))
    return hd, assd


def test_dice_precision_recall_counts():
    pred = np.zeros((2, 3, 3))
    gt = np.zeros((2, 3, 3))
    pred[0, 0, :2] = 1
    gt[0, 0, 1:] = 1
    dice, precision, recall = metrics.dice_precision_recall(pred, gt)
    assert dice == pytest.approx(2 * 1 / (2 * 1 + 1 + 1))
    assert precision == pytest.approx(0.5)
    assert recall == pytest.approx(0.5)


def test_dice_empty_conventions():
    empty = np.zeros((2, 3, 3))
    full = np.ones((2, 3, 3))
    assert metrics.dice_precision_recall(empty, empty) == (1.0, 1.0, 1.0)
    assert metrics.dice_precision_recall(full, empty) == (0.0, 0.0, 0.0)
    assert metrics.dice_precision_recall(empty, full) == (0.0, 0.0, 0.0)


def test_surface_voxels_against_brute_force():
    rng = np.random.default_rng(0)
    cube = np.zeros((5, 5, 5))
    cube[1:4, 1:4, 1:4] = 1
    surf = metrics.surface_voxels(cube)
    assert len(surf) == 26  # all but the center voxel
    for _ in range(10):
        mask = rand_mask(rng, (4, 6, 6), density=0.6)
        got = {tuple(p) for p in metrics.surface_voxels(mask)}
        want = {tuple(p) for p in brute_force_surface(mask)}
        assert got == want


def test_distances_single_voxel_pair():
    a = np.zeros((3, 5, 5))
    b = np.zeros((3, 5, 5))
    a[1, 2, 2] = 1
    b[2, 2, 4] = 1
    spacing = (8.0, 1.0, 1.0)
    expected = math.sqrt(8.0**2 + 2.0**2)
    assert metrics.hausdorff_distance(a, b, spacing) == pytest.approx(expected)
    assert metrics.assd(a, b, spacing) == pytest.approx(expected)


def test_distances_against_brute_force():
    rng = np.random.default_rng(1)
    spacing = (8.0, 1.0, 1.5)
    for _ in range(10):
        pred = rand_mask(rng, (3, 7, 7), density=0.75)
        gt = rand_mask(rng, (3, 7, 7), density=0.75)
        if not pred.any() or not gt.any():
            continue
        hd_ref, assd_ref = brute_force_distances(pred, gt, spacing)
        assert metrics.hausdorff_distance(pred, gt, spacing) == pytest.approx(hd_ref, abs=1e-9)
        assert metrics.assd(pred, gt, spacing) == pytest.approx(assd_ref, abs=1e-9)


def test_distances_identity_and_symmetry():
    rng = np.random.default_rng(2)
    mask = rand_mask(rng, (3, 6, 6), density=0.7)
    other = rand_mask(rng, (3, 6, 6), density=0.7)
    spacing = (2.0, 1.0, 1.0)
    assert metrics.hausdorff_distance(mask, mask, spacing) == 0.0
    assert metrics.assd(mask, mask, spacing) == 0.0
    assert metrics.hausdorff_distance(mask, other, spacing) == pytest.approx(
        metrics.hausdorff_distance(other, mask, spacing)
    )
    with pytest.raises(UndefinedMetricError):
        metrics.hausdorff_distance(np.zeros((2, 2, 2)), mask[:2, :2, :2], spacing)


def test_volume_and_rve():
    mask = np.zeros((2, 4, 4))
    mask[0, :2, :2] = 1
    spacing = (8.0, 1.0, 1.0)
    assert metrics.lesion_volume_cc(mask, spacing) == pytest.approx(4 * 8 / 1000.0)
    pred = np.zeros_like(mask)
    pred[0, 0, :2] = 1
    assert metrics.relative_volume_error(pred, mask, spacing) == pytest.approx(0.5)
    with pytest.raises(UndefinedMetricError):
        metrics.relative_volume_error(pred, np.zeros_like(mask), spacing)


def test_size_buckets():
    assert metrics.bucket_of_volume(9.99) == "small"
    assert metrics.bucket_of_volume(10.0) == "medium"
    assert metrics.bucket_of_volume(50.0) == "medium"
    assert metrics.bucket_of_volume(50.01) == "large"
    gt = np.ones((10, 10, 10))  # 1000 voxels at 8 mm^3 = 8 CC
    assert metrics.size_bucket(gt, (8.0, 1.0, 1.0)) == "small"
    with pytest.raises(UndefinedMetricError):
        metrics.size_bucket(np.zeros((2, 2, 2)), (1, 1, 1))


def brute_force_ssim_slice(a, b):
    win, c1, c2 = 7, 1e-4, 9e-4
    vals = []
    for y in range(a.shape[0] - win + 1):
        for x in range(a.shape[1] - win + 1):
            pa = a[y : y + win, x : x + win].astype(np.float64)
            pb = b[y : y + win, x : x + win].astype(np.float64)
            mu_a, mu_b = pa.mean(), pb.mean()
            var_a, var_b = pa.var(), pb.var()
            cov = ((pa - mu_a) * (pb - mu_b)).mean()
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(vals))


def test_ssim_matches_brute_force():
    rng = np.random.default_rng(3)
    a = rng.random((2, 10, 11))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    ref = np.mean([brute_force_ssim_slice(a[z], b[z]) for z in range(2)])
    assert metrics.ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_properties():
    rng = np.random.default_rng(4)
    a = rng.random((2, 12, 12))
    assert metrics.ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    b = rng.random((2, 12, 12))
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-12)
    assert metrics.ssim(a, b) < 1.0
    with pytest.raises(UndefinedMetricError):
        metrics.ssim(a[:, :5, :5], a[:, :5, :5])
    with pytest.raises(UndefinedMetricError):
        metrics.ssim(a, b[:1])


def test_local_region_dilation():
    gt = np.zeros((5, 30, 30))
    gt[2, 10:12, 20:23] = 1
    region = metrics.local_region(gt)
    assert region == (slice(1, 4), slice(5, 17), slice(15, 28))
    # clipping at the boundary
    gt2 = np.zeros((2, 8, 8))
    gt2[0, 0, 0] = 1
    assert metrics.local_region(gt2) == (slice(0, 2), slice(0, 6), slice(0, 6))
    with pytest.raises(UndefinedMetricError):
        metrics.local_region(np.zeros((2, 8, 8)))


def test_local_ssim_uses_region():
    rng = np.random.default_rng(5)
    a = rng.random((3, 24, 24))
    b = a.copy()
    # corrupt only far outside the lesion region
    b[0, 20:, 20:] = rng.random((4, 4))
    gt = np.zeros_like(a)
    gt[1, 4:6, 4:6] = 1
    assert metrics.local_ssim(a, b, gt) == pytest.approx(1.0, abs=1e-12)
    assert metrics.ssim(a, b) < 1.0


def test_psnr_values():
    a = np.zeros((2, 4, 4))
    b = np.full((2, 4, 4), 0.5)
    assert metrics.psnr(a, b) == pytest.approx(10 * math.log10(1 / 0.25), abs=1e-9)
    assert metrics.psnr(a, a) == math.inf
    region = (slice(0, 1), slice(0, 4), slice(0, 4))
    assert metrics.psnr(a, b, region=region) == pytest.approx(6.0206, abs=1e-3)


def test_evaluate_case_full_row():
    rng = np.random.default_rng(6)
    gt = np.zeros((3, 16, 16), np.float32)
    gt[1, 4:8, 4:8] = 1
    pred = np.zeros_like(gt)
    pred[1, 5:8, 4:8] = 1
    dwi = rng.random((3, 16, 16))
    pseudo = np.clip(dwi + 0.05 * rng.standard_normal(dwi.shape), 0, 1)
    row = metrics.evaluate_case(pred, gt, (8.0, 1.0, 1.0), pseudo, dwi)
    for column in metrics.METRIC_COLUMNS:
        assert column in row
    assert row["notes"] == ""
    assert row["size_bucket"] == "small"
    assert 0 < row["dice"] <= 1


def test_evaluate_case_empty_pred_records_notes():
    gt = np.zeros((3, 16, 16), np.float32)
    gt[1, 4:8, 4:8] = 1
    row = metrics.evaluate_case(np.zeros_like(gt), gt, (8.0, 1.0, 1.0))
    assert row["dice"] == 0.0
    assert row["hd_mm"] is None and row["assd_mm"] is None
    assert "hd_mm" in row["notes"]
    assert row["ssim_global"] is None  # no synthesis supplied


def test_report_aggregate_and_serialization(tmp_path):
    report = metrics.MetricsReport()
    report.add("case_a", {"dice": 0.8, "size_bucket": "small", "notes": ""})
    report.add("case_b", {"dice": 0.6, "size_bucket": "small", "notes": ""})
    report.add("case_c", {"dice": 0.4, "hd_mm": None, "size_bucket": "large", "notes": "x"})
    agg = report.aggregate()
    assert agg["n_cases"] == 3
    assert agg["overall"]["dice"]["mean"] == pytest.approx(0.6)
    assert agg["overall"]["dice"]["std"] == pytest.approx(np.std([0.8, 0.6, 0.4]))
    assert agg["small"]["dice"]["mean"] == pytest.approx(0.7)
    assert agg["small"]["n_cases"] == 2
    assert agg["medium"]["n_cases"] == 0

    report.write_csv(tmp_path / "report.csv")
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0].split(",")[:4] == ["case_id", "dice", "precision", "recall"]
    assert len(lines) == 4

    report.write_json(tmp_path / "report.json")
    doc = json.loads((tmp_path / "report.json").read_text())
    assert set(doc) == {"cases", "aggregate"}
    assert doc["cases"]["case_a"]["dice"] == 0.8


def test_report_infinite_values_excluded_from_aggregate():
    report = metrics.MetricsReport()
    report.add("case_a", {"psnr_global": math.inf, "size_bucket": "small", "notes": ""})
    report.add("case_b", {"psnr_global": 30.0, "size_bucket": "small", "notes": ""})
    assert report.mean_std("psnr_global") == (30.0, 0.0)
