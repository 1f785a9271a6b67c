"""Transformer text encoder producing the textual stream."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from essen.config import TextTowerConfig
from essen.layers import EncoderBlock


@dataclass
class TextStates:
    states: torch.Tensor  # (batch, len, d_t)
    attn_mask: torch.Tensor  # (batch, len), 1 = real token


def check_token_ids(ids: torch.Tensor, vocab_size: int, max_len: int) -> None:
    if ids.shape[-1] > max_len:
        raise ValueError(f"token sequence length {ids.shape[-1]} exceeds max_len {max_len}")
    if ids.numel() and (int(ids.max()) >= vocab_size or int(ids.min()) < 0):
        raise ValueError(f"token id out of range for vocab_size {vocab_size}: "
                         f"max id {int(ids.max())}")


class TextTower(nn.Module):
    def __init__(self, cfg: TextTowerConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.hidden)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.hidden, cfg.heads, cfg.ffn) for _ in range(cfg.layers))

    def forward(self, ids: torch.Tensor, attn_mask: torch.Tensor) -> TextStates:
        check_token_ids(ids, self.cfg.vocab_size, self.cfg.max_len)
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None]
        for block in self.blocks:
            x = block(x, key_mask=attn_mask)
        return TextStates(x, attn_mask)


def encode_text(ids, attn_mask, tower: TextTower) -> TextStates:
    """Encode a batch of token ids (shape ``(batch, len)`` or ``(len,)``)."""
    ids = torch.as_tensor(ids, dtype=torch.long)
    attn_mask = torch.as_tensor(attn_mask, dtype=torch.long)
    if ids.dim() == 1:
        ids, attn_mask = ids[None], attn_mask[None]
    return tower(ids, attn_mask)
