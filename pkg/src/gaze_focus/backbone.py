"""Frozen vision-language backbone interface with a seeded toy implementation.

The pipeline only ever reads four intermediate visual feature grids (taps
``stem``, ``3``, ``6``, ``9``) and one final text embedding from the
backbone; nothing is written back and no gradient reaches its parameters.
This module defines that interface and ships a deterministic, randomly
initialized stand-in: a small frozen ViT over 16x16 patches plus a tiny
frozen text transformer over hashed word tokens. A pretrained checkpoint
can be dropped in later by implementing the same two calls.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
from torch import nn

from .data import PATCH_SIZE

VISUAL_TAPS = ("stem", "3", "6", "9")


@dataclass(frozen=True)
class BackboneDims:
    """Channel/embedding sizes of the toy backbone."""

    channels: int = 192  # visual feature channels per tap
    text_dim: int = 128  # final text embedding length
    visual_layers: int = 10
    text_layers: int = 2
    visual_heads: int = 4
    text_heads: int = 4
    vocab_size: int = 4096
    base_grid: int = 14  # positional table side, interpolated elsewhere


@dataclass(frozen=True)
class VisualFeatures:
    """Per-tap feature grids of shape (H/16, W/16, channels)."""

    taps: dict[str, torch.Tensor]

    def __post_init__(self) -> None:
        if set(self.taps) != set(VISUAL_TAPS):
            raise ValueError(f"expected exactly taps {VISUAL_TAPS}, got {sorted(self.taps)}")
        shapes = {tuple(t.shape) for t in self.taps.values()}
        if len(shapes) != 1:
            raise ValueError(f"tap shapes disagree: {shapes}")


def _trunc_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator) -> None:
    # inverse-CDF sampling restricted to +-2 std
    a, b = -2.0, 2.0
    lo = 0.5 * (1.0 + math.erf(a / math.sqrt(2.0)))
    hi = 0.5 * (1.0 + math.erf(b / math.sqrt(2.0)))
    u = torch.rand(tensor.shape, generator=generator, dtype=torch.float64)
    u = lo + u * (hi - lo)
    samples = torch.erfinv(2.0 * u - 1.0) * math.sqrt(2.0) * std
    with torch.no_grad():
        tensor.copy_(samples.to(tensor.dtype))


def seed_parameters(module: nn.Module, seed: int, alpha_names: tuple[str, ...] = ()) -> None:
    """Deterministically re-initialize a module from a private generator.

    Weight matrices get truncated normal (std 0.02), vectors listed in
    ``alpha_names`` get ones, everything else 1-D is zeroed, LayerNorm
    weights stay at one.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        if any(name.endswith(a) for a in alpha_names):
            with torch.no_grad():
                param.fill_(1.0)
        elif param.ndim >= 2:
            _trunc_normal_(param, std=0.02, generator=gen)
        elif "norm" in name.lower() and name.endswith("weight"):
            with torch.no_grad():
                param.fill_(1.0)
        else:
            with torch.no_grad():
                param.zero_()


class TransformerLayer(nn.Module):
    """Pre-norm self-attention block with a 4x GELU feed-forward."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


def _hash_token(token: str, vocab_size: int) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % vocab_size


def resize_pos_table(table: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
    """Bilinearly adapt a (1, g*g, C) positional table to a new grid."""
    n = table.shape[1]
    g = int(round(math.sqrt(n)))
    if (g, g) == (grid_h, grid_w):
        return table
    as_img = table.reshape(1, g, g, -1).permute(0, 3, 1, 2)
    resized = torch.nn.functional.interpolate(
        as_img, size=(grid_h, grid_w), mode="bilinear", align_corners=False
    )
    return resized.permute(0, 2, 3, 1).reshape(1, grid_h * grid_w, -1)


class FrozenBackbone(nn.Module):
    """Deterministic frozen encoder pair (visual taps + text embedding)."""

    def __init__(self, seed: int, dims: BackboneDims | None = None):
        super().__init__()
        self.dims = dims or BackboneDims()
        d = self.dims
        if d.channels % d.visual_heads or d.text_dim % d.text_heads:
            raise ValueError("feature dims must be divisible by their head counts")
        self.seed = seed
        self.patch_size = PATCH_SIZE
        self.patch_proj = nn.Conv2d(1, d.channels, PATCH_SIZE, stride=PATCH_SIZE)
        self.pos_table = nn.Parameter(torch.zeros(1, d.base_grid * d.base_grid, d.channels))
        self.visual_blocks = nn.ModuleList(
            TransformerLayer(d.channels, d.visual_heads) for _ in range(d.visual_layers)
        )
        self.token_table = nn.Parameter(torch.zeros(d.vocab_size, d.text_dim))
        self.text_pos = nn.Parameter(torch.zeros(1, 32, d.text_dim))
        self.text_blocks = nn.ModuleList(
            TransformerLayer(d.text_dim, d.text_heads) for _ in range(d.text_layers)
        )
        seed_parameters(self, seed)
        # positional tables carry signal from the start; re-init nonzero
        gen = torch.Generator().manual_seed(seed + 1)
        _trunc_normal_(self.pos_table, std=0.02, generator=gen)
        _trunc_normal_(self.text_pos, std=0.02, generator=gen)
        for p in self.parameters():
            p.requires_grad_(False)

    # ------------------------------------------------------------------
    # visual side
    # ------------------------------------------------------------------

    def _visual_tokens(self, images: torch.Tensor) -> tuple[dict[str, torch.Tensor], torch.Tensor, int, int]:
        if images.ndim == 2:
            images = images[None, None]
        elif images.ndim == 3:
            images = images[:, None]
        b, _, h, w = images.shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(
                f"image size {w}x{h} not divisible by patch size {self.patch_size}"
            )
        gh, gw = h // self.patch_size, w // self.patch_size
        with torch.no_grad():
            x = self.patch_proj(images)  # (B, C, gh, gw)
            x = x.flatten(2).transpose(1, 2)  # (B, N, C)
            x = x + resize_pos_table(self.pos_table, gh, gw).to(x.dtype)
            taps = {"stem": x}
            for i, block in enumerate(self.visual_blocks, start=1):
                x = block(x)
                if str(i) in VISUAL_TAPS:
                    taps[str(i)] = x
        return taps, x, gh, gw

    def visual_encode(self, images: torch.Tensor) -> VisualFeatures:
        """Four tap grids of shape (B, H/16, W/16, channels)."""
        taps, _, gh, gw = self._visual_tokens(images)
        b = next(iter(taps.values())).shape[0]
        grids = {
            name: tokens.reshape(b, gh, gw, self.dims.channels)
            for name, tokens in taps.items()
        }
        return VisualFeatures(taps=grids)

    def final_patch_tokens(self, images: torch.Tensor) -> torch.Tensor:
        """Last-layer patch tokens (B, N, channels), for the classifier."""
        _, final, _, _ = self._visual_tokens(images)
        return final

    # ------------------------------------------------------------------
    # text side
    # ------------------------------------------------------------------

    def text_encode(self, prompt: str) -> torch.Tensor:
        """Final embedding of a prompt; deterministic per (seed, prompt)."""
        tokens = prompt.lower().split()
        if not tokens:
            raise ValueError("prompt must be non-empty")
        ids = [_hash_token(t, self.dims.vocab_size) for t in tokens]
        with torch.no_grad():
            x = self.token_table[ids][None]  # (1, T, E)
            x = x + self.text_pos[:, : x.shape[1]].to(x.dtype)
            for block in self.text_blocks:
                x = block(x)
            return x.mean(dim=1)[0]

    def parameter_checksum(self) -> str:
        """Stable digest of all parameters, for freeze verification."""
        digest = hashlib.sha256()
        for name, param in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            digest.update(name.encode())
            digest.update(param.detach().to(torch.float64).numpy().tobytes())
        return digest.hexdigest()


def make_toy_backbone(seed: int, dims: BackboneDims | None = None) -> FrozenBackbone:
    """Construct the frozen toy backbone; parameters depend only on seed."""
    backbone = FrozenBackbone(seed=seed, dims=dims)
    backbone.eval()
    return backbone
