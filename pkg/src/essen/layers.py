"""Transformer building blocks shared by every tower and the fusion core."""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

INIT_STD = 0.02


def real_length(key_mask: torch.Tensor) -> int:
    """Number of leading key positions that are real in at least one row.

    Padding is always a suffix, so keys past this point never receive
    attention weight and can be dropped before the softmax. Dropping them
    (rather than only masking) makes outputs bit-identical under extra padding.
    """
    any_real = key_mask.bool().any(dim=0)
    idx = torch.nonzero(any_real)
    return int(idx[-1]) + 1 if len(idx) else 0


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query and key/value sources."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, context=None, key_mask=None, return_weights=False, trim=True):
        if context is None:
            context = x
        if x.shape[-1] != self.dim or context.shape[-1] != self.dim:
            raise ValueError(f"attention width mismatch: expected {self.dim}, "
                             f"got query {x.shape[-1]} and context {context.shape[-1]}")
        if key_mask is not None:
            key_mask = key_mask.bool()
            if trim:
                n = real_length(key_mask)
                context, key_mask = context[:, :n], key_mask[:, :n]
        b, lq, _ = x.shape
        lk = context.shape[1]
        hd = self.dim // self.heads
        q = self.q(x).view(b, lq, self.heads, hd).transpose(1, 2)
        k = self.k(context).view(b, lk, self.heads, hd).transpose(1, 2)
        v = self.v(context).view(b, lk, self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        # a query row with no real key at all would be NaN
        weights = torch.nan_to_num(weights, nan=0.0)
        out = (weights @ v).transpose(1, 2).reshape(b, lq, self.dim)
        out = self.o(out)
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.up = nn.Linear(dim, hidden)
        self.down = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.down(F.gelu(self.up(x)))


class EncoderBlock(nn.Module):
    """Post-norm self-attention block: x = LN(x + MHA(x)); x = LN(x + FFN(x))."""

    def __init__(self, dim: int, heads: int, ffn: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.ln1 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn)
        self.ln2 = nn.LayerNorm(dim)

    def forward(self, x, key_mask=None, trim=True):
        x = self.ln1(x + self.attn(x, key_mask=key_mask, trim=trim))
        return self.ln2(x + self.ffn(x))


class Projection(nn.Module):
    """Per-token affine map between widths; parameter-free identity when widths match."""

    def __init__(self, in_width: int, out_width: int, identity_if_equal: bool = True):
        super().__init__()
        self.in_width, self.out_width = in_width, out_width
        if identity_if_equal and in_width == out_width:
            self.proj = nn.Identity()
        else:
            self.proj = nn.Linear(in_width, out_width)

    def forward(self, x):
        if x.shape[-1] != self.in_width:
            raise ValueError(f"projection expects width {self.in_width}, got {x.shape[-1]}")
        return self.proj(x)


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Family-convention init: truncated normal(0.02), zero biases, unit LN gains.

    Convolutions use a fan-in scaled std instead so signal survives the
    normalization-free CNN stack.
    """
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD,
                                  generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            fan_in = m.weight[0].numel()
            std = math.sqrt(2.0 / fan_in)
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD,
                                  generator=generator)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        else:
            for p in m.parameters(recurse=False):
                nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD,
                                      generator=generator)
