"""Finding classification from heatmap-masked images.

The image is multiplied elementwise by the heatmap before it reaches the
encoder, so the classifier can only consume pixels the gaze model deemed
relevant: two images identical wherever the heatmap is nonzero produce
bit-identical predictions. Only the linear head trains; the visual encoder
is the frozen backbone.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .backbone import FrozenBackbone, seed_parameters


def mask_image(image: np.ndarray, heatmap: np.ndarray) -> np.ndarray:
    """Hadamard re-weighting of pixels by heatmap intensity."""
    image = np.asarray(image)
    heatmap = np.asarray(heatmap)
    if image.shape != heatmap.shape:
        raise ValueError(
            f"image shape {image.shape} does not match heatmap shape {heatmap.shape}"
        )
    return image * heatmap


class ClassifierHead(nn.Module):
    """Linear head over centered pooled features.

    ``feature_center`` is a fixed buffer (the training-set feature mean,
    set once before head training, never updated by gradients). Pooled
    features of frozen random encoders share a dominant common component
    across inputs; removing it is what lets the 2-way head converge.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.linear = nn.Linear(dim, 2)
        self.register_buffer("feature_center", torch.zeros(dim))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.linear(feats - self.feature_center)


class FindingClassifier(nn.Module):
    """Frozen visual encoder plus a trainable 2-way linear head."""

    def __init__(self, backbone: FrozenBackbone, seed: int = 0):
        super().__init__()
        self.backbone = backbone
        self.head = ClassifierHead(backbone.dims.channels)
        seed_parameters(self.head, seed)

    def features(self, masked_images: torch.Tensor) -> torch.Tensor:
        """Mean-pooled final patch tokens of the frozen encoder."""
        tokens = self.backbone.final_patch_tokens(masked_images)
        return tokens.mean(dim=1)

    def set_feature_center(self, train_features: torch.Tensor) -> None:
        with torch.no_grad():
            self.head.feature_center.copy_(train_features.mean(dim=0))

    def logits_from_features(self, feats: torch.Tensor) -> torch.Tensor:
        return self.head(feats)

    def forward(self, masked_images: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(masked_images))

    def classify(self, masked_image: torch.Tensor | np.ndarray) -> torch.Tensor:
        """Probability pair (negative, positive); sums to one."""
        if isinstance(masked_image, np.ndarray):
            masked_image = torch.from_numpy(np.ascontiguousarray(masked_image)).float()
        with torch.no_grad():
            logits = self.forward(masked_image)
            probs = torch.softmax(logits, dim=-1)
        return probs[0] if probs.shape[0] == 1 else probs

    def trainable_parameters(self):
        return self.head.linear.parameters()
