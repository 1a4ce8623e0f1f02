"""Image encoder, mask-aware region extractor and the two perceiver resamplers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .layers import FeedForward, MultiHeadAttention, grid_position_embedding

RESAMPLER_IDS = ("llm_side", "encoder_side")


@dataclass
class ImageEmbedding:
    tokens: Tensor  # N x C (or B x N x C)
    grid_shape: tuple

    def __post_init__(self):
        h, w = self.grid_shape
        if self.tokens.shape[-2] != h * w:
            raise ValueError(f"{self.tokens.shape[-2]} tokens do not fill grid {self.grid_shape}")


@dataclass
class ResampledTokens:
    tokens: Tensor  # M x C


def _as_channels_first(pixels) -> Tensor:
    x = torch.as_tensor(pixels)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected H x W x 3 or B x H x W x 3 pixels, got {tuple(x.shape)}")
    return x.permute(0, 3, 1, 2)


class ImageEncoder(nn.Module):
    """Strided conv stack producing an (H/s)(W/s) x C token grid.

    A small stand-in for the pretrained vision foundation model. ``stride``
    must be a power of two; each halving is one stride-2 conv block.
    """

    def __init__(self, dim: int = 128, stride: int = 16, width: int = 32):
        super().__init__()
        n_down = int(round(math.log2(stride)))
        if 2**n_down != stride:
            raise ValueError(f"stride must be a power of two, got {stride}")
        self.dim = dim
        self.stride = stride
        layers = [nn.Conv2d(3, width, 3, padding=1), nn.GELU()]
        ch = width
        for i in range(n_down):
            nxt = min(width * 2 ** (i + 1), 4 * width)
            layers += [
                nn.Conv2d(ch, nxt, 3, stride=2, padding=1),
                nn.GELU(),
                nn.Conv2d(nxt, nxt, 3, padding=1),
                nn.GELU(),
            ]
            ch = nxt
        self.body = nn.Sequential(*layers)
        self.proj = nn.Linear(ch, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, pixels: Tensor) -> Tensor:
        """B x H x W x 3 in [0, 1] -> B x N x C."""
        x = _as_channels_first(pixels)
        _, _, h, w = x.shape
        if h % self.stride or w % self.stride:
            raise ValueError(f"image {h}x{w} not divisible by encoder stride {self.stride}")
        feats = self.body(x * 2.0 - 1.0)
        gh, gw = feats.shape[-2:]
        tokens = self.proj(feats.flatten(2).transpose(1, 2))
        pos = grid_position_embedding(gh, gw, self.dim, dtype=tokens.dtype).to(tokens.device)
        return self.norm(tokens + pos)

    def grid_shape(self, h: int, w: int) -> tuple:
        return (h // self.stride, w // self.stride)


def encode_image(encoder: ImageEncoder, pixels) -> ImageEmbedding:
    """Encode a single H x W x 3 image."""
    x = torch.as_tensor(np.asarray(pixels) if not isinstance(pixels, Tensor) else pixels)
    param = next(encoder.parameters())
    x = x.to(dtype=param.dtype, device=param.device)
    if x.ndim != 3:
        raise ValueError(f"expected a single H x W x 3 image, got shape {tuple(x.shape)}")
    tokens = encoder(x[None])[0]
    return ImageEmbedding(tokens, encoder.grid_shape(*x.shape[:2]))


def downsample_mask(mask: Tensor, grid_shape: tuple) -> Tensor:
    """Area-average a (B x) H x W binary mask onto the token grid, threshold at 0.5."""
    m = torch.as_tensor(mask)
    squeeze = m.ndim == 2
    if squeeze:
        m = m[None]
    gh, gw = grid_shape
    h, w = m.shape[-2:]
    if h % gh or w % gw:
        raise ValueError(f"mask {h}x{w} does not tile onto grid {grid_shape}")
    cells = F.avg_pool2d(m[:, None].to(torch.float64), kernel_size=(h // gh, w // gw))[:, 0]
    out = (cells >= 0.5).flatten(1)
    return out[0] if squeeze else out


def mask_aware_extract(e: ImageEmbedding, mask) -> ImageEmbedding:
    """Multiply each visual token by its grid cell's (binarised) mask value."""
    m = torch.as_tensor(mask)
    gh, gw = e.grid_shape
    if m.shape[-2] < gh or m.shape[-1] < gw or m.shape[-2] % gh or m.shape[-1] % gw:
        raise ValueError(f"mask shape mismatch: {tuple(m.shape)} vs grid {e.grid_shape}")
    cell = downsample_mask(m, e.grid_shape).to(e.tokens.dtype)
    return ImageEmbedding(e.tokens * cell[..., None], e.grid_shape)


def apply_token_mask(tokens: Tensor, masks: Optional[Tensor], grid_shape: tuple) -> Tensor:
    """Batched form of :func:`mask_aware_extract` on raw B x N x C tokens."""
    if masks is None:
        return tokens
    cell = downsample_mask(masks, grid_shape).to(tokens.dtype)
    return tokens * cell[..., None]


class ResamplerBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.ff = FeedForward(dim)

    def forward(self, latents: Tensor, tokens: Tensor, key_mask: Optional[Tensor]) -> Tensor:
        latents = latents + self.attn(self.norm_q(latents), self.norm_kv(tokens), key_mask=key_mask)
        return latents + self.ff(latents)


class PerceiverResampler(nn.Module):
    """Learned queries cross-attending to a variable-size token set."""

    def __init__(self, dim: int, num_queries: int = 8, depth: int = 2, heads: int = 4):
        super().__init__()
        self.num_queries = num_queries
        self.queries = nn.Parameter(torch.randn(num_queries, dim) * 0.02)
        self.blocks = nn.ModuleList([ResamplerBlock(dim, heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, tokens: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        """B x N x C (+ optional B x N bool mask) -> B x M x C."""
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens[None]
        if tokens.shape[1] < 1:
            raise ValueError("resampler needs at least one input token")
        lat = self.queries.expand(tokens.shape[0], -1, -1)
        for blk in self.blocks:
            lat = blk(lat, tokens, key_mask)
        out = self.out(self.norm(lat))
        return out[0] if squeeze else out


class Connectors(nn.Module):
    """The two independent resamplers.

    ``encoder_side`` maps encoder tokens to the visual tokens seen by the
    decoder (also the self-conditioning used for consistency
    regularisation); ``llm_side`` maps decoder hidden states to the
    diffusion condition for next-image prediction.
    """

    def __init__(self, dim: int, m_llm: int = 8, m_enc: int = 8, depth: int = 2, heads: int = 4):
        super().__init__()
        self.llm_side = PerceiverResampler(dim, m_llm, depth, heads)
        self.encoder_side = PerceiverResampler(dim, m_enc, depth, heads)

    def resample(self, tokens: Tensor, which: str, key_mask: Optional[Tensor] = None) -> Tensor:
        if which not in RESAMPLER_IDS:
            raise KeyError(f"unknown resampler {which!r}; expected one of {RESAMPLER_IDS}")
        return getattr(self, which)(tokens, key_mask)
