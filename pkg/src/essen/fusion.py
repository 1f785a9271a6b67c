"""Cross-modal cores: the dual-stream fusion encoder and the one-tower joint encoder.

:class:`VisionLanguageEncoder` assembles towers, projections, the core and
the pooler from a :class:`~essen.config.ModelConfig`. It holds no task
heads, so its parameters are exactly what the parameter report counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from essen.config import ModelConfig, VisionCnnConfig, check_config
from essen.layers import EncoderBlock, FeedForward, MultiHeadAttention, Projection, init_weights
from essen.text_tower import TextTower, check_token_ids
from essen.vision_tower import CnnTower, PatchEmbedding, build_vision_tower, check_images

TEXT_TYPE, IMAGE_TYPE = 0, 1


@dataclass
class FusedStates:
    text_stream: torch.Tensor  # (batch, len_t, d)
    vision_stream: torch.Tensor  # (batch, n_v, d)
    pooled: torch.Tensor  # (batch, d)
    text_mask: torch.Tensor


class Pooler(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.dense = nn.Linear(width, width)

    def forward(self, text_stream):
        return torch.tanh(self.dense(text_stream[:, 0]))


def pool(fused: FusedStates, pooler: Pooler) -> torch.Tensor:
    return pooler(fused.text_stream)


class FusionStream(nn.Module):
    """One side of a fusion layer: cross-attention then FFN, post-norm."""

    def __init__(self, dim: int, heads: int, ffn: int):
        super().__init__()
        self.cross = MultiHeadAttention(dim, heads)
        self.ln1 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn)
        self.ln2 = nn.LayerNorm(dim)

    def forward(self, x, other, other_mask=None):
        x = self.ln1(x + self.cross(x, other, key_mask=other_mask))
        return self.ln2(x + self.ffn(x))


class FusionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn: int):
        super().__init__()
        self.text = FusionStream(dim, heads, ffn)
        self.vision = FusionStream(dim, heads, ffn)

    def forward(self, t, v, text_mask):
        # both sides read the previous layer's states
        return self.text(t, v), self.vision(v, t, text_mask)


class FusionEncoder(nn.Module):
    def __init__(self, dim: int, heads: int, ffn: int, layers: int):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(FusionLayer(dim, heads, ffn) for _ in range(layers))

    def forward(self, text, vision, text_mask):
        if text.shape[-1] != self.dim or vision.shape[-1] != self.dim:
            raise ValueError(f"fusion width mismatch: expected {self.dim}, got "
                             f"text {text.shape[-1]} and vision {vision.shape[-1]}")
        for layer in self.layers:
            text, vision = layer(text, vision, text_mask)
        return text, vision


def fusion_forward(text, vision, text_mask, fusion: FusionEncoder, pooler: Pooler) -> FusedStates:
    t, v = fusion(text, vision, text_mask)
    return FusedStates(t, v, pooler(t), text_mask)


class OneTowerEncoder(nn.Module):
    """Single self-attention encoder over [CLS] text [SEP] + pad, [SEP], visual tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        t = cfg.text
        self.cfg = cfg
        self.tok_emb = nn.Embedding(t.vocab_size, t.hidden)
        self.pos_emb = nn.Embedding(cfg.joint_max_len, t.hidden)
        self.type_emb = nn.Embedding(2, t.hidden)
        self.blocks = nn.ModuleList(EncoderBlock(t.hidden, t.heads, t.ffn) for _ in range(t.layers))

    def forward(self, text_emb, vision_emb, text_mask):
        """Run the joint encoder over already-embedded streams at the joint width."""
        b, lt, d = text_emb.shape
        nv = vision_emb.shape[1]
        if vision_emb.shape[-1] != d:
            raise ValueError(f"one-tower width mismatch: text {d}, vision {vision_emb.shape[-1]}")
        total = lt + 1 + nv
        if total > self.cfg.joint_max_len:
            raise ValueError(f"joint length {total} exceeds configured maximum {self.cfg.joint_max_len}")
        sep = self.tok_emb.weight[3].expand(b, 1, d)
        x = torch.cat([text_emb, sep, vision_emb], dim=1)
        types = torch.cat([torch.full((lt + 1,), TEXT_TYPE), torch.full((nv,), IMAGE_TYPE)])
        x = x + self.type_emb(types)[None] + self.pos_emb(torch.arange(total))[None]
        mask = torch.cat([text_mask.long(), torch.ones(b, 1 + nv, dtype=torch.long)], dim=1)
        for block in self.blocks:
            # padding sits mid-sequence here, so mask rather than trim
            x = block(x, key_mask=mask, trim=False)
        return x[:, :lt], x[:, lt + 1:]


def one_tower_forward(text_emb, vision_emb, text_mask, encoder: OneTowerEncoder,
                      pooler: Pooler) -> FusedStates:
    t, v = encoder(text_emb, vision_emb, text_mask)
    return FusedStates(t, v, pooler(t), text_mask)


class VisionLanguageEncoder(nn.Module):
    """A complete encoder built from a validated config.

    Submodule names are the keys of the parameter report.
    """

    def __init__(self, cfg: ModelConfig, init: bool = True):
        super().__init__()
        cfg = check_config(cfg)
        self.cfg = cfg
        d = cfg.width
        if cfg.arch == "two-tower":
            f = cfg.fusion
            self.text_tower = TextTower(cfg.text)
            self.vision_tower = build_vision_tower(cfg.vision)
            self.text_proj = Projection(cfg.text.hidden, d)
            self.vision_proj = Projection(cfg.vision.out_width, d)
            self.fusion = FusionEncoder(d, f.heads, f.ffn, f.layers)
        else:
            self.encoder = OneTowerEncoder(cfg)
            if isinstance(cfg.vision, VisionCnnConfig):
                self.vision_embed = CnnTower(cfg.vision)
            else:
                self.vision_embed = PatchEmbedding(cfg.vision.patch_size, cfg.vision.hidden)
            self.vision_proj = Projection(cfg.vision.out_width, d)
        self.pooler = Pooler(d)
        if init:
            self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            init_weights(self, g)

    @property
    def width(self) -> int:
        return self.cfg.width

    def forward(self, ids, attn_mask, pixels) -> FusedStates:
        ids = torch.as_tensor(ids, dtype=torch.long)
        attn_mask = torch.as_tensor(attn_mask, dtype=torch.long)
        if ids.dim() == 1:
            ids, attn_mask = ids[None], attn_mask[None]
        dtype = next(self.parameters()).dtype
        pixels = check_images(torch.as_tensor(pixels), self.cfg.image_size).to(dtype)
        if self.cfg.arch == "two-tower":
            text = self.text_tower(ids, attn_mask)
            vision = self.vision_tower(pixels)
            t = self.text_proj(text.states)
            v = self.vision_proj(vision.states)
            return fusion_forward(t, v, attn_mask, self.fusion, self.pooler)
        check_token_ids(ids, self.cfg.text.vocab_size, self.cfg.text.max_len)
        text_emb = self.encoder.tok_emb(ids)
        vis = self.vision_embed(pixels)
        vis = vis.states if hasattr(vis, "states") else vis
        return one_tower_forward(text_emb, self.vision_proj(vis), attn_mask,
                                 self.encoder, self.pooler)


def build_model(cfg: ModelConfig) -> VisionLanguageEncoder:
    return VisionLanguageEncoder(cfg)
