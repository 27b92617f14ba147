"""Location and intensity metrics over heatmap pairs, plus report assembly.

Location metrics binarize: ground truth at value > 0, predictions at
probability > 0.5 (a sigmoid output is never exactly zero). Intensity
metrics compare the raw fields. Aggregates are arithmetic means over
samples, mirroring the mSSIM/mPSNR/mL1/mL2 convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
PRED_MASK_THRESHOLD = 0.5
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _as_binary(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask) > 0


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray, which: str = "fg") -> float:
    """Intersection over union on the chosen class; 1.0 when both empty."""
    pred, gt = _as_binary(pred_mask), _as_binary(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if which == "bg":
        pred, gt = ~pred, ~gt
    elif which != "fg":
        raise ValueError(f"which must be 'fg' or 'bg', got {which!r}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def fw_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """IoU per class weighted by the ground-truth class frequencies."""
    gt = _as_binary(gt_mask)
    freq_fg = float(gt.mean())
    return freq_fg * iou(pred_mask, gt_mask, "fg") + (1.0 - freq_fg) * iou(
        pred_mask, gt_mask, "bg"
    )


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return w / w.sum()


def _windowed_mean(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    out = correlate1d(x, window, axis=0, mode="reflect")
    return correlate1d(out, window, axis=1, mode="reflect")


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean local structural similarity, 11x11 Gaussian window, range 1."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if min(pred.shape) < SSIM_WINDOW:
        raise ValueError(
            f"image {pred.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_p = _windowed_mean(pred, w)
    mu_g = _windowed_mean(gt, w)
    var_p = _windowed_mean(pred * pred, w) - mu_p * mu_p
    var_g = _windowed_mean(gt * gt, w) - mu_g * mu_g
    cov = _windowed_mean(pred * gt, w) - mu_p * mu_g
    num = (2.0 * mu_p * mu_g + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_p * mu_p + mu_g * mu_g + SSIM_C1) * (var_p + var_g + SSIM_C2)
    return float((num / den).mean())


def l1_mean(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.abs(pred - gt).mean())


def l2_mean(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(((pred - gt) ** 2).mean())


def psnr(pred: np.ndarray, gt: np.ndarray, cap: float = PSNR_CAP) -> float:
    """10*log10(1/MSE) in dB for unit dynamic range; cap when MSE is zero."""
    mse = l2_mean(pred, gt)
    if mse == 0.0:
        return cap
    return float(-10.0 * np.log10(mse))


def area_ratio(values: np.ndarray, threshold: float = 0.0) -> float:
    """Fraction of pixels strictly above threshold.

    Use threshold 0 for ground-truth heatmaps and 0.5 for predicted
    probability heatmaps.
    """
    values = np.asarray(values)
    return float((values > threshold).mean())


@dataclass
class MetricsReport:
    """Per-sample heatmap metrics, their means, and classifier accuracy."""

    per_sample: list[dict] = dataclass_field(default_factory=list)
    aggregates: dict[str, float] = dataclass_field(default_factory=dict)
    accuracy: float | None = None
    provenance: dict = dataclass_field(default_factory=dict)


SAMPLE_METRIC_KEYS = ("fgIoU", "bgIoU", "fwIoU", "ssim", "psnr", "l1", "l2", "area_ratio")
AGGREGATE_KEYS = ("fgIoU", "bgIoU", "fwIoU", "mSSIM", "mPSNR", "mL1", "mL2")


def heatmap_pair_metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """All location and intensity metrics for one (prediction, truth) pair."""
    pred_mask = np.asarray(pred) > PRED_MASK_THRESHOLD
    gt_mask = np.asarray(gt) > 0.0
    return {
        "fgIoU": iou(pred_mask, gt_mask, "fg"),
        "bgIoU": iou(pred_mask, gt_mask, "bg"),
        "fwIoU": fw_iou(pred_mask, gt_mask),
        "ssim": ssim(pred, gt),
        "psnr": psnr(pred, gt),
        "l1": l1_mean(pred, gt),
        "l2": l2_mean(pred, gt),
        "area_ratio": area_ratio(pred, PRED_MASK_THRESHOLD),
    }


def evaluate(
    pred_set: dict[str, np.ndarray],
    gt_set: dict[str, np.ndarray],
    labels: dict[str, int] | None = None,
    predictions: dict[str, int] | None = None,
    provenance: dict | None = None,
) -> MetricsReport:
    """Aggregate metrics over id-aligned heatmap sets, plus accuracy.

    Raises when prediction and ground-truth ids (or label ids) disagree.
    """
    if set(pred_set) != set(gt_set):
        raise ValueError(
            f"sample id mismatch: predictions {sorted(set(pred_set) ^ set(gt_set))} unmatched"
        )
    report = MetricsReport(provenance=provenance or {})
    for sample_id in sorted(pred_set):
        row = {"id": sample_id}
        row.update(heatmap_pair_metrics(pred_set[sample_id], gt_set[sample_id]))
        report.per_sample.append(row)
    n = len(report.per_sample)
    if n:
        report.aggregates = {
            "fgIoU": sum(r["fgIoU"] for r in report.per_sample) / n,
            "bgIoU": sum(r["bgIoU"] for r in report.per_sample) / n,
            "fwIoU": sum(r["fwIoU"] for r in report.per_sample) / n,
            "mSSIM": sum(r["ssim"] for r in report.per_sample) / n,
            "mPSNR": sum(r["psnr"] for r in report.per_sample) / n,
            "mL1": sum(r["l1"] for r in report.per_sample) / n,
            "mL2": sum(r["l2"] for r in report.per_sample) / n,
        }
    if labels is not None and predictions is not None:
        if set(labels) != set(predictions):
            raise ValueError("label and prediction ids disagree")
        if labels:
            hits = sum(1 for k in labels if labels[k] == predictions[k])
            report.accuracy = hits / len(labels)
    return report
