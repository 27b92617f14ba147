"""Prompt-conditioned adapter that turns an image into a heatmap logit field.

The adapter is a small ViT over 16x16 patches whose token field carries one
extra learnable scaling token alongside the patch tokens. Frozen backbone
features are injected additively by fusion blocks before each of the first
four transformer layers (backbone taps stem/3/6/9 onto adapter slots
stem/1/2/3), together with a broadcast projection of the text embedding.
The intensity decoder maps final patch tokens and the final scaling token
through separate MLPs and takes their inner product per patch, giving a
low-resolution logit grid that is bilinearly upsampled to image size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import VISUAL_TAPS, VisualFeatures, seed_parameters, TransformerLayer
from .data import PATCH_SIZE


@dataclass(frozen=True)
class AdapterConfig:
    depth: int = 8
    dim: int = 240
    heads: int = 6
    patch_size: int = PATCH_SIZE
    decoder_depth: int = 3
    decoder_hidden: int = 256
    decoder_out: int = 256
    #: backbone tap -> index of the adapter layer the fusion precedes
    fusion_map: dict[str, int] = field(
        default_factory=lambda: {"stem": 0, "3": 1, "6": 2, "9": 3}
    )
    #: "alpha_product" is the full decoder; "channel_mean" is the ablated
    #: variant that averages decoded patch channels instead.
    decoder_mode: str = "alpha_product"

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if set(self.fusion_map) != set(VISUAL_TAPS):
            raise ValueError(
                f"fusion_map must cover exactly the backbone taps {VISUAL_TAPS}"
            )
        if max(self.fusion_map.values()) >= self.depth:
            raise ValueError("fusion_map refers past the last adapter layer")
        if self.decoder_mode not in ("alpha_product", "channel_mean"):
            raise ValueError(f"unknown decoder_mode {self.decoder_mode!r}")


class FusionBlock(nn.Module):
    """Additive injection of one backbone tap plus the text embedding.

    The tap grid passes a 1x1 convolution down to the adapter width and is
    resized to the patch grid; the text embedding passes a linear map and is
    broadcast over all patch positions. Both are summed onto the patch
    tokens. The scaling token never passes through here.
    """

    def __init__(self, backbone_channels: int, text_dim: int, dim: int):
        super().__init__()
        self.visual_proj = nn.Conv2d(backbone_channels, dim, kernel_size=1)
        self.text_proj = nn.Linear(text_dim, dim)

    def forward(
        self, patch_tokens: torch.Tensor, tap: torch.Tensor, text: torch.Tensor
    ) -> torch.Tensor:
        n = patch_tokens.shape[1]
        # tap arrives channel-last (B, h, w, C)
        vis = self.visual_proj(tap.permute(0, 3, 1, 2))
        target = _square_grid(n)
        if vis.shape[-2:] != target:
            vis = F.interpolate(vis, size=target, mode="bilinear", align_corners=False)
        vis = vis.flatten(2).transpose(1, 2)  # (B, N, D)
        if text.ndim == 1:
            text = text[None]
        txt = self.text_proj(text)[:, None, :]  # (B, 1, D) broadcast over patches
        return patch_tokens + vis + txt


def _square_grid(n: int) -> tuple[int, int]:
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ValueError(f"token count {n} is not a square grid")
    return (g, g)


class DecoderMLP(nn.Module):
    """Residual-free MLP head; needs unit-gain (fan-in scaled) init.

    The transformer blocks tolerate the tiny 0.02-std init because their
    residual paths carry the signal, but a stacked head at that scale
    attenuates activations (and gradients) by orders of magnitude and the
    intensity decoder never learns spatial structure. Fan-in scaling keeps
    the head's forward gain near one.
    """

    def __init__(self, dim_in: int, hidden: int, dim_out: int, depth: int):
        super().__init__()
        sizes = [dim_in] + [hidden] * (depth - 1) + [dim_out]
        layers: list[nn.Module] = []
        for i in range(depth):
            layers.append(nn.Linear(sizes[i], sizes[i + 1]))
            if i < depth - 1:
                layers.append(nn.GELU())
        self.net = nn.Sequential(*layers)

    def reseed(self, generator: torch.Generator) -> None:
        from .backbone import _trunc_normal_

        for layer in self.net:
            if isinstance(layer, nn.Linear):
                std = 1.0 / math.sqrt(layer.in_features)
                _trunc_normal_(layer.weight, std=std, generator=generator)
                with torch.no_grad():
                    layer.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class AnatomicAdapter(nn.Module):
    """Trainable heatmap predictor conditioned on an anatomical prompt."""

    def __init__(
        self,
        config: AdapterConfig,
        backbone_channels: int,
        text_dim: int,
        seed: int = 0,
    ):
        super().__init__()
        self.config = config
        c = config
        self.patch_proj = nn.Conv2d(1, c.dim, c.patch_size, stride=c.patch_size)
        self.alpha = nn.Parameter(torch.ones(c.dim))
        self.layers = nn.ModuleList(
            TransformerLayer(c.dim, c.heads) for _ in range(c.depth)
        )
        # fusion blocks keyed by the adapter slot they precede
        self.fusions = nn.ModuleDict(
            {
                tap: FusionBlock(backbone_channels, text_dim, c.dim)
                for tap in VISUAL_TAPS
            }
        )
        self.norm_out = nn.LayerNorm(c.dim)
        self.decode_patches = DecoderMLP(c.dim, c.decoder_hidden, c.decoder_out, c.decoder_depth)
        self.decode_alpha = DecoderMLP(c.dim, c.decoder_hidden, c.decoder_out, c.decoder_depth)
        seed_parameters(self, seed, alpha_names=("alpha",))
        gen = torch.Generator().manual_seed(seed + 1)
        self.decode_patches.reseed(gen)
        self.decode_alpha.reseed(gen)

    # ------------------------------------------------------------------

    def patch_embed(self, images: torch.Tensor) -> torch.Tensor:
        """Project patches and append the scaling token: (B, N+1, D)."""
        if images.ndim == 2:
            images = images[None, None]
        elif images.ndim == 3:
            images = images[:, None]
        b, _, h, w = images.shape
        if h % self.config.patch_size or w % self.config.patch_size:
            raise ValueError(
                f"image size {w}x{h} not divisible by patch size {self.config.patch_size}"
            )
        tokens = self.patch_proj(images).flatten(2).transpose(1, 2)
        alpha = self.alpha[None, None, :].expand(b, 1, -1).to(tokens.dtype)
        return torch.cat([tokens, alpha], dim=1)

    def fuse_tokens(
        self, tokens: torch.Tensor, tap_name: str, tap: torch.Tensor, text: torch.Tensor
    ) -> torch.Tensor:
        """Apply one fusion block to the patch tokens; the alpha token
        (last position) passes through untouched."""
        patches, alpha = tokens[:, :-1], tokens[:, -1:]
        patches = self.fusions[tap_name](patches, tap, text)
        return torch.cat([patches, alpha], dim=1)

    def adapter_forward(
        self,
        images: torch.Tensor,
        visual: VisualFeatures,
        text: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the fused transformer stack; returns (patch tokens, alpha)."""
        tokens = self.patch_embed(images)
        slot_to_tap = {slot: tap for tap, slot in self.config.fusion_map.items()}
        for i, layer in enumerate(self.layers):
            tap_name = slot_to_tap.get(i)
            if tap_name is not None:
                tokens = self.fuse_tokens(tokens, tap_name, visual.taps[tap_name], text)
            tokens = layer(tokens)
        tokens = self.norm_out(tokens)
        return tokens[:, :-1], tokens[:, -1]

    def decode_intensity(
        self, patch_tokens: torch.Tensor, alpha_token: torch.Tensor
    ) -> torch.Tensor:
        """Per-patch logits: decoded tokens dotted with the decoded alpha.

        The ablated "channel_mean" mode bypasses the decoder and averages
        each output token's channels directly, the naive alternative the
        scaling token is meant to replace.
        """
        if self.config.decoder_mode == "channel_mean":
            return patch_tokens.mean(dim=-1)
        decoded = self.decode_patches(patch_tokens)  # (B, N, D')
        alpha = self.decode_alpha(alpha_token)  # (B, D')
        return torch.einsum("bnd,bd->bn", decoded, alpha)

    def forward(
        self,
        images: torch.Tensor,
        visual: VisualFeatures,
        text: torch.Tensor,
    ) -> torch.Tensor:
        """Full-resolution logit field (B, H, W)."""
        if images.ndim == 2:
            images = images[None, None]
        elif images.ndim == 3:
            images = images[:, None]
        h, w = images.shape[-2:]
        patch_tokens, alpha_token = self.adapter_forward(images, visual, text)
        logits = self.decode_intensity(patch_tokens, alpha_token)
        gh, gw = h // self.config.patch_size, w // self.config.patch_size
        return upsample_logits(logits.reshape(-1, gh, gw), w, h)


def upsample_logits(grid_logits: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """Bilinear resize from the patch grid to (B, H, W).

    Patch-center sample points reproduce the grid values exactly.
    """
    if grid_logits.ndim == 2:
        grid_logits = grid_logits[None]
    out = F.interpolate(
        grid_logits[:, None], size=(height, width), mode="bilinear", align_corners=False
    )
    return out[:, 0]


def predict_heatmap(
    adapter: AnatomicAdapter,
    backbone,
    images: torch.Tensor,
    prompt: str,
) -> torch.Tensor:
    """Sigmoid heatmap in (0, 1) for one prompt over a batch of images."""
    visual = backbone.visual_encode(images)
    text = backbone.text_encode(prompt)
    logits = adapter(images, visual, text)
    return torch.sigmoid(logits)
