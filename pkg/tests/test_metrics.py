import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaze_focus.metrics import (
    area_ratio,
    evaluate,
    fw_iou,
    heatmap_pair_metrics,
    iou,
    l1_mean,
    l2_mean,
    psnr,
    ssim,
)


def brute_force_iou(pred, gt, which):
    """Pixel-counting oracle over explicit loops."""
    inter = union = 0
    for p, g in zip(pred.flatten(), gt.flatten()):
        p, g = bool(p), bool(g)
        if which == "bg":
            p, g = not p, not g
        inter += p and g
        union += p or g
    return inter / union if union else 1.0


@pytest.fixture
def quadrant_fixture():
    pred = np.zeros((4, 4), dtype=np.uint8)
    pred[:2, :2] = 1  # top-left 2x2
    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[:, :2] = 1  # left two columns
    return pred, gt


# ------------------------------------------------------------------------- IoU


def test_iou_identity():
    mask = np.eye(6, dtype=np.uint8)
    assert iou(mask, mask, "fg") == 1.0
    assert iou(mask, mask, "bg") == 1.0


def test_iou_disjoint():
    a = np.zeros((4, 4), dtype=np.uint8)
    a[0, 0] = 1
    b = np.zeros((4, 4), dtype=np.uint8)
    b[3, 3] = 1
    assert iou(a, b, "fg") == 0.0


def test_iou_quadrant_fixture(quadrant_fixture):
    pred, gt = quadrant_fixture
    assert iou(pred, gt, "fg") == pytest.approx(4 / 8)  # pixel-count oracle
    assert iou(pred, gt, "bg") == pytest.approx(8 / 12)


def test_iou_empty_convention():
    z = np.zeros((3, 3), dtype=np.uint8)
    assert iou(z, z, "fg") == 1.0


def test_iou_symmetric(rng):
    a = rng.random((8, 8)) > 0.5
    b = rng.random((8, 8)) > 0.5
    assert iou(a, b, "fg") == iou(b, a, "fg")
    assert iou(a, b, "bg") == iou(b, a, "bg")


def test_iou_brute_force_random(rng):
    for _ in range(20):
        a = rng.random((8, 8)) > rng.uniform(0.2, 0.8)
        b = rng.random((8, 8)) > rng.uniform(0.2, 0.8)
        assert iou(a, b, "fg") == brute_force_iou(a, b, "fg")
        assert iou(a, b, "bg") == brute_force_iou(a, b, "bg")


# ------------------------------------------------------------------------ fwIoU


def test_fwiou_identity(quadrant_fixture):
    _, gt = quadrant_fixture
    assert fw_iou(gt, gt) == 1.0


def test_fwiou_quadrant_fixture(quadrant_fixture):
    pred, gt = quadrant_fixture
    assert fw_iou(pred, gt) == pytest.approx(0.5 * 0.5 + 0.5 * (8 / 12))


def test_fwiou_all_background_degenerates_to_bg():
    gt = np.zeros((5, 5), dtype=np.uint8)
    pred = np.zeros((5, 5), dtype=np.uint8)
    pred[0, 0] = 1
    assert fw_iou(pred, gt) == iou(pred, gt, "bg")


def test_fwiou_weighted_sum_identity(rng):
    pred = rng.random((8, 8)) > 0.6
    gt = rng.random((8, 8)) > 0.4
    freq = gt.mean()
    expected = freq * iou(pred, gt, "fg") + (1 - freq) * iou(pred, gt, "bg")
    assert fw_iou(pred, gt) == expected


def test_fwiou_not_symmetric(rng):
    pred = rng.random((8, 8)) > 0.7
    gt = rng.random((8, 8)) > 0.3
    assert fw_iou(pred, gt) != pytest.approx(fw_iou(gt, pred))


# ------------------------------------------------------------------------ SSIM


def test_ssim_self_is_one(rng):
    x = rng.random((16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_pair_is_one():
    x = np.full((12, 12), 0.4)
    assert ssim(x, x.copy()) == pytest.approx(1.0, abs=1e-12)


def test_ssim_inverted_checkerboard_strongly_negative():
    yy, xx = np.mgrid[0:16, 0:16]
    gt = ((yy + xx) % 2).astype(np.float64)
    pred = 1.0 - gt
    assert ssim(pred, gt) < -0.5


def test_ssim_window_guard():
    x = np.zeros((8, 8))
    with pytest.raises(ValueError, match="window"):
        ssim(x, x)


# ------------------------------------------------------------------------ PSNR


def test_psnr_identical_capped(rng):
    x = rng.random((8, 8))
    assert psnr(x, x) == 100.0


def test_psnr_formula_oracle():
    gt = np.zeros((10, 10))
    pred = np.full((10, 10), 0.1)  # MSE = 0.01
    assert psnr(pred, gt) == pytest.approx(20.0, abs=1e-9)


def test_psnr_unit_mse():
    gt = np.zeros((4, 4))
    pred = np.ones((4, 4))
    assert psnr(pred, gt) == pytest.approx(0.0, abs=1e-12)


def test_psnr_symmetric_and_l2_identity(rng):
    a = rng.random((8, 8))
    b = rng.random((8, 8))
    assert psnr(a, b) == psnr(b, a)
    assert psnr(a, b) == pytest.approx(-10 * math.log10(l2_mean(a, b)), abs=1e-9)


# --------------------------------------------------------------------- L1 / L2


def test_l1_l2_identity_zero(rng):
    x = rng.random((6, 6))
    assert l1_mean(x, x) == 0.0
    assert l2_mean(x, x) == 0.0


def test_l1_l2_constant_offset():
    a = np.full((5, 5), 0.5)
    b = np.full((5, 5), 0.6)
    assert l1_mean(a, b) == pytest.approx(0.1, abs=1e-12)
    assert l2_mean(a, b) == pytest.approx(0.01, abs=1e-12)


def test_l1_l2_elementwise_oracle(rng):
    a = rng.random((3, 3))
    b = rng.random((3, 3))
    l1 = sum(abs(x - y) for x, y in zip(a.flatten(), b.flatten())) / 9
    l2 = sum((x - y) ** 2 for x, y in zip(a.flatten(), b.flatten())) / 9
    assert l1_mean(a, b) == pytest.approx(l1, abs=1e-12)
    assert l2_mean(a, b) == pytest.approx(l2, abs=1e-12)


# ------------------------------------------------------------------ area ratio


def test_area_ratio_zero_field():
    assert area_ratio(np.zeros((6, 6))) == 0.0


def test_area_ratio_half():
    x = np.zeros((4, 4))
    x[:2] = 0.9
    assert area_ratio(x) == 0.5


def test_area_ratio_disk_geometric_oracle():
    from gaze_focus.data import Fixation
    from gaze_focus.gazeprep import render_heatmap

    radius = 150.0
    heat = render_heatmap([Fixation(223.5, 223.5, 0.0, 1.0)], 448, 448, radius).values
    expected = math.pi * radius**2 / 448**2
    assert area_ratio(heat, 0.0) == pytest.approx(expected, rel=0.01)


# ------------------------------------------------------------------- evaluate


def test_evaluate_id_mismatch(rng):
    a = {"x": rng.random((16, 16))}
    b = {"y": rng.random((16, 16))}
    with pytest.raises(ValueError, match="mismatch"):
        evaluate(a, b)


def test_evaluate_aggregates_are_means(rng):
    preds = {f"s{i}": rng.random((16, 16)) for i in range(4)}
    gts = {f"s{i}": rng.random((16, 16)) for i in range(4)}
    report = evaluate(preds, gts)
    assert len(report.per_sample) == 4
    mean_l1 = np.mean([r["l1"] for r in report.per_sample])
    assert report.aggregates["mL1"] == pytest.approx(mean_l1, abs=1e-12)
    assert set(report.aggregates) == {"fgIoU", "bgIoU", "fwIoU", "mSSIM", "mPSNR", "mL1", "mL2"}


def test_evaluate_accuracy(rng):
    preds = {f"s{i}": rng.random((16, 16)) for i in range(4)}
    gts = {f"s{i}": rng.random((16, 16)) for i in range(4)}
    labels = {"s0": 1, "s1": 0, "s2": 1, "s3": 0}
    predictions = {"s0": 1, "s1": 1, "s2": 1, "s3": 0}
    report = evaluate(preds, gts, labels, predictions)
    assert report.accuracy == pytest.approx(0.75)


def test_heatmap_pair_uses_half_threshold():
    pred = np.full((16, 16), 0.4)
    gt = np.zeros((16, 16))
    row = heatmap_pair_metrics(pred, gt)
    assert row["fgIoU"] == 1.0  # both masks empty under the 0.5 / 0 thresholds
    assert row["area_ratio"] == 0.0


# ------------------------------------------------------------------ properties


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_permutation_invariance(seed):
    gen = np.random.default_rng(seed)
    a = gen.random((4, 4))
    b = gen.random((4, 4))
    perm = gen.permutation(16)
    a_p = a.flatten()[perm].reshape(4, 4)
    b_p = b.flatten()[perm].reshape(4, 4)
    assert iou(a > 0.5, b > 0.5, "fg") == iou(a_p > 0.5, b_p > 0.5, "fg")
    assert fw_iou(a > 0.5, b > 0.5) == pytest.approx(fw_iou(a_p > 0.5, b_p > 0.5), abs=1e-12)
    assert l1_mean(a, b) == pytest.approx(l1_mean(a_p, b_p), abs=1e-12)
    assert l2_mean(a, b) == pytest.approx(l2_mean(a_p, b_p), abs=1e-12)
    assert psnr(a, b) == pytest.approx(psnr(a_p, b_p), abs=1e-9)
