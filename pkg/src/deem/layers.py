"""Attention building blocks shared by the encoder side, the decoder and the denoiser."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(kv_dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(
        self,
        x: Tensor,
        context: Optional[Tensor] = None,
        key_mask: Optional[Tensor] = None,
        causal: bool = False,
    ) -> Tensor:
        """``key_mask`` is boolean B x S, True where a key may be attended."""
        context = x if context is None else context
        b, n, d = x.shape
        s = context.shape[1]
        h = self.heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k, v = self.kv(context).view(b, s, 2, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        allowed = None
        if causal:
            allowed = torch.ones(n, s, dtype=torch.bool, device=x.device).tril()
        if key_mask is not None:
            km = key_mask[:, None, None, :]
            allowed = km if allowed is None else allowed & km
        if allowed is not None:
            scores = scores.masked_fill(~allowed, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        # rows with no admissible key (fully padded queries) produce NaN; zero them
        attn = torch.nan_to_num(attn, nan=0.0)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim), nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim)
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


def sinusoidal_embedding(positions: Tensor, dim: int) -> Tensor:
    """Standard transformer sin/cos embedding of (possibly fractional) positions."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=positions.dtype, device=positions.device) / half
    )
    args = positions[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def grid_position_embedding(h: int, w: int, dim: int, dtype=torch.float32) -> Tensor:
    """2-D sin/cos embedding for an h x w token grid, row-major, shape (h*w, dim)."""
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    half = dim // 2
    emb = torch.cat(
        [sinusoidal_embedding(ys.reshape(-1), half), sinusoidal_embedding(xs.reshape(-1), dim - half)],
        dim=-1,
    )
    return emb
