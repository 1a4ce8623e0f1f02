"""The assembled model: encoder, connectors, decoder, denoiser and their shared config."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn

from .diffusion import Denoiser, NoiseSchedule
from .lm import CausalDecoder
from .sequence import Tokenizer
from .vision import Connectors, ImageEncoder, apply_token_mask

GROUPS = ("VFM", "LLM", "DM", "connectors")


@dataclass
class ModelConfig:
    dim: int = 128
    resolution: int = 64
    enc_stride: int = 16
    enc_width: int = 32
    lm_layers: int = 4
    heads: int = 4
    m_llm: int = 8
    m_enc: int = 8
    resampler_depth: int = 2
    dm_width: int = 32
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    rescale_betas: bool = True
    max_len: int = 2048
    tie_head: bool = False

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class DEEMModel(nn.Module):
    def __init__(self, config: ModelConfig, tokenizer: Tokenizer):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer
        c = config
        self.encoder = ImageEncoder(c.dim, c.enc_stride, c.enc_width)
        self.connectors = Connectors(c.dim, c.m_llm, c.m_enc, c.resampler_depth, c.heads)
        self.decoder = CausalDecoder(tokenizer.vocab_size, c.dim, c.lm_layers, c.heads, c.max_len, c.tie_head)
        self.denoiser = Denoiser(c.dim, c.dm_width, c.heads, c.T)
        self.schedule = NoiseSchedule(c.T, c.beta_start, c.beta_end, c.rescale_betas)

    @property
    def num_visual_tokens(self) -> int:
        return self.config.m_enc

    @property
    def special(self):
        return self.tokenizer.special

    def parameter_groups(self) -> dict:
        return {
            "VFM": self.encoder,
            "LLM": self.decoder,
            "DM": self.denoiser,
            "connectors": self.connectors,
        }

    def visual_tokens(self, pixels: Tensor, masks: Optional[Tensor] = None) -> Tensor:
        """B x H x W x 3 -> B x M_enc x C tokens fed to the decoder."""
        tokens = self.encoder(pixels)
        grid = self.encoder.grid_shape(pixels.shape[1], pixels.shape[2])
        tokens = apply_token_mask(tokens, masks, grid)
        return self.connectors.resample(tokens, "encoder_side")

    def images_to_tensor(self, images) -> tuple:
        """Stack ImageRecords into pixel and (optional) mask tensors."""
        dtype = next(self.parameters()).dtype
        px = torch.as_tensor(np.stack([im.pixels for im in images]), dtype=dtype)
        if all(im.mask is None for im in images):
            return px, None
        masks = torch.as_tensor(np.stack([im.effective_mask() for im in images]), dtype=dtype)
        return px, masks

    def state_groups(self) -> dict:
        return {k: m.state_dict() for k, m in self.parameter_groups().items()}

    def load_state_groups(self, groups: dict, only: Optional[tuple] = None) -> None:
        for k, m in self.parameter_groups().items():
            if only is None or k in only:
                m.load_state_dict(groups[k])
