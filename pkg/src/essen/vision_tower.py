"""Image encoders: a patch-embedding transformer and a depthwise-separable CNN.

Both produce a sequence of visual tokens that is later projected to the
fusion width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from essen.config import VisionCnnConfig, VisionPatchConfig
from essen.layers import EncoderBlock, Projection


@dataclass
class VisualTokens:
    states: torch.Tensor  # (batch, n_tokens, width)
    attn_mask: torch.Tensor  # all ones


def check_images(pixels: torch.Tensor, image_size: int | None = None) -> torch.Tensor:
    """Validate a (batch, 3, H, W) or (3, H, W) float image tensor in [0, 1]."""
    pixels = torch.as_tensor(pixels)
    if pixels.dim() == 3:
        pixels = pixels[None]
    if pixels.dim() != 4 or pixels.shape[1] != 3:
        raise ValueError(f"expected images shaped (batch, 3, H, W), got {tuple(pixels.shape)}")
    if not torch.isfinite(pixels).all():
        raise ValueError("image contains non-finite pixels")
    if pixels.shape[2] != pixels.shape[3]:
        raise ValueError(f"images must be square, got {pixels.shape[2]}x{pixels.shape[3]}")
    if image_size is not None and pixels.shape[2] != image_size:
        raise ValueError(f"image size {pixels.shape[2]} does not match configured {image_size}")
    return pixels


def patchify(img, patch_size: int):
    """Split images into non-overlapping row-major patches of 3*p*p values.

    Accepts (3, H, W) or (batch, 3, H, W); numpy arrays and tensors both work.
    Within a patch, values are ordered channel, row, column.
    """
    is_np = isinstance(img, np.ndarray)
    x = torch.as_tensor(img)
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    b, c, h, w = x.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {patch_size}")
    g_h, g_w = h // patch_size, w // patch_size
    x = x.reshape(b, c, g_h, patch_size, g_w, patch_size)
    x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, g_h * g_w, c * patch_size * patch_size)
    if squeeze:
        x = x[0]
    return x.numpy() if is_np else x


def unpatchify(patches, patch_size: int, image_size: int, channels: int = 3):
    """Inverse of :func:`patchify`."""
    is_np = isinstance(patches, np.ndarray)
    x = torch.as_tensor(patches)
    squeeze = x.dim() == 2
    if squeeze:
        x = x[None]
    g = image_size // patch_size
    x = x.reshape(x.shape[0], g, g, channels, patch_size, patch_size)
    x = x.permute(0, 3, 1, 4, 2, 5).reshape(x.shape[0], channels, image_size, image_size)
    if squeeze:
        x = x[0]
    return x.numpy() if is_np else x


class PatchEmbedding(nn.Module):
    def __init__(self, patch_size: int, width: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(3 * patch_size * patch_size, width)

    def forward(self, pixels):
        return self.proj(patchify(pixels, self.patch_size))


class PatchTower(nn.Module):
    """Vision transformer: patch projection, [IMG-CLS], positions, encoder blocks."""

    def __init__(self, cfg: VisionPatchConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbedding(cfg.patch_size, cfg.hidden)
        self.cls = nn.Parameter(torch.zeros(cfg.hidden))
        self.pos = nn.Parameter(torch.zeros(cfg.n_patches + 1, cfg.hidden))
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.hidden, cfg.heads, cfg.ffn) for _ in range(cfg.layers))

    def forward(self, pixels) -> VisualTokens:
        pixels = check_images(pixels, self.cfg.image_size)
        x = self.embed(pixels)
        cls = self.cls.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos[None]
        for block in self.blocks:
            x = block(x)
        return VisualTokens(x, torch.ones(x.shape[:2], dtype=torch.long))


class SeparableBlock(nn.Module):
    """Depthwise 3x3 -> pointwise 1x1 -> GELU."""

    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.depthwise = nn.Conv2d(c_in, c_in, 3, stride=stride, padding=1, groups=c_in)
        self.pointwise = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        return F.gelu(self.pointwise(self.depthwise(x)))


class CnnTower(nn.Module):
    """Compact convolutional image encoder.

    Each stage halves the resolution in its first block. The final
    (C, S, S) map is flattened row-major into S*S tokens and mapped to
    ``out_proj`` channels by a 1x1 head.
    """

    def __init__(self, cfg: VisionCnnConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels
        self.stem = nn.Conv2d(3, chans[0], 3, padding=1)
        blocks = []
        c_in = chans[0]
        for c_out in chans:
            for i in range(cfg.blocks_per_stage):
                blocks.append(SeparableBlock(c_in, c_out, stride=2 if i == 0 else 1))
                c_in = c_out
        self.stages = nn.Sequential(*blocks)
        self.head = nn.Linear(chans[-1], cfg.out_proj)

    def feature_map(self, pixels):
        pixels = check_images(pixels, self.cfg.image_size)
        return self.stages(F.gelu(self.stem(pixels)))

    def forward(self, pixels) -> VisualTokens:
        fmap = self.feature_map(pixels)
        tokens = fmap.flatten(2).transpose(1, 2)
        x = self.head(tokens)
        return VisualTokens(x, torch.ones(x.shape[:2], dtype=torch.long))


def build_vision_tower(cfg) -> nn.Module:
    if isinstance(cfg, VisionCnnConfig):
        return CnnTower(cfg)
    return PatchTower(cfg)


def encode_image_patch(img, tower: PatchTower) -> VisualTokens:
    return tower(img)


def encode_image_cnn(img, tower: CnnTower) -> VisualTokens:
    return tower(img)


def project_to_fusion(tokens, proj: Projection):
    """Apply the per-token bridge to ``proj.out_width``; works on any stream."""
    states = tokens.states if hasattr(tokens, "states") else tokens
    if not torch.isfinite(states).all():
        raise ValueError("cannot project non-finite tokens")
    out = proj(states)
    if hasattr(tokens, "states"):
        return type(tokens)(out, tokens.attn_mask)
    return out
