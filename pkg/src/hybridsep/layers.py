"""Shared neural building blocks: transformer layers, positions."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


def sinusoidal_positions(n: int, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard fixed sinusoidal position table of shape [n, dim]."""
    pos = torch.arange(n, dtype=dtype).unsqueeze(1)
    half = dim // 2
    freq = torch.exp(
        torch.arange(half, dtype=dtype) * (-math.log(10000.0) / max(half - 1, 1))
    )
    angles = pos * freq
    table = torch.zeros(n, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1 : 2 * half : 2] = torch.cos(angles)
    return table


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with a GELU MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, need_weights=False)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x
