"""Training objectives for the heatmap predictor and the classifier.

The heatmap target lives in [0, 1]; its regression loss is computed in
logit space (mean squared difference against the logit-transformed target)
to keep gradients alive near saturation. Mask supervision binarizes the
ground truth at zero and applies soft dice plus logit-form binary
cross-entropy to the predicted probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

DICE_SMOOTHING = 1.0


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights for (logit L2, cross-entropy, dice)."""

    l2: float = 1.0
    ce: float = 1.0
    dice: float = 1.0

    def __post_init__(self) -> None:
        for name, v in (("l2", self.l2), ("ce", self.ce), ("dice", self.dice)):
            if not (v >= 0.0 and v == v):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


def logit_transform(a: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Elementwise inverse sigmoid of a clamped to [eps, 1-eps]."""
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    return torch.logit(torch.clamp(a, eps, 1.0 - eps))


def heatmap_l2(pred_logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Mean squared difference between predicted and target logits."""
    if pred_logits.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_logits.shape)} vs {tuple(target.shape)}")
    return ((pred_logits - logit_transform(target, eps)) ** 2).mean()


def binarize(a: torch.Tensor, threshold: float = 0.0) -> torch.Tensor:
    """Strict-threshold mask: 1 where a > threshold."""
    return (a > threshold).to(a.dtype)


def dice_loss(pred_probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Soft dice against a binary mask, smoothing 1."""
    if pred_probs.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_probs.shape)} vs {tuple(mask.shape)}")
    s = DICE_SMOOTHING
    inter = (pred_probs * mask).sum()
    return 1.0 - (2.0 * inter + s) / (pred_probs.sum() + mask.sum() + s)


def bce_loss(pred_logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Numerically stable binary cross-entropy on logits, pixel mean."""
    if pred_logits.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_logits.shape)} vs {tuple(mask.shape)}")
    return F.binary_cross_entropy_with_logits(pred_logits, mask.to(pred_logits.dtype))


def combined_loss(
    pred_logits: torch.Tensor,
    target: torch.Tensor,
    weights: LossWeights | None = None,
    eps: float = 1e-4,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted heatmap objective; returns (total, per-component values)."""
    w = weights or LossWeights()
    mask = binarize(target, 0.0)
    l2 = heatmap_l2(pred_logits, target, eps)
    ce = bce_loss(pred_logits, mask)
    dc = dice_loss(torch.sigmoid(pred_logits), mask)
    total = w.l2 * l2 + w.ce * ce + w.dice * dc
    components = {"l2": float(l2.detach()), "ce": float(ce.detach()), "dice": float(dc.detach())}
    return total, components


def classifier_ce(logits: torch.Tensor, y: int | torch.Tensor) -> torch.Tensor:
    """Two-way softmax cross-entropy."""
    if logits.ndim == 1:
        logits = logits[None]
    if isinstance(y, int):
        if y not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {y}")
        y = torch.tensor([y], dtype=torch.long)
    else:
        y = y.reshape(-1).long()
        if y.numel() and not bool(((y == 0) | (y == 1)).all()):
            raise ValueError("labels must be 0 or 1")
    return F.cross_entropy(logits, y.to(logits.device))
