"""Toy pretrained components for the synthetic-shapes world.

Stage I starts from a frozen language model, a frozen diffusion model and a
pretrained image encoder. At desk scale these are produced here:

* the decoder learns text in which an image slot (``<SOI>`` + one run of
  positions) holds word embeddings of the object's attributes, followed by
  captions or yes/no questions about the object;
* the denoiser learns to draw an object conditioned on those same
  attribute embeddings (so both read one shared token space);
* the encoder is trained to classify color and texture only, so its
  features carry little shape information.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import DiffusionCondition, denoising_loss
from .lm import ntp_loss
from .model import DEEMModel, ModelConfig
from .sequence import Tokenizer
from .synth import COLORS, SHAPES, TEXTURES, Attributes, all_combos, describe_caption, make_samples, qa_caption, vocabulary_texts

log = logging.getLogger(__name__)


def toy_config(**overrides) -> ModelConfig:
    cfg = dict(dim=64, resolution=32, enc_stride=8, enc_width=16, lm_layers=2, heads=4, m_llm=8, m_enc=8,
               resampler_depth=2, dm_width=16, T=100, max_len=64)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def build_tokenizer() -> Tokenizer:
    texts = vocabulary_texts() + ["a red solid object"]
    return Tokenizer.from_corpus(texts)


def attribute_slot(attrs: Attributes, n: int, rng: np.random.Generator) -> list:
    """``n`` attribute words in random order, each attribute at least once."""
    words = [attrs.shape, attrs.color, attrs.texture]
    fill = [words[i] for i in rng.integers(0, 3, size=n - 3)]
    slot = words + fill
    rng.shuffle(slot)
    return slot


def object_caption(attrs: Attributes) -> str:
    return f"a {attrs.color} {attrs.texture} object"


@dataclass
class BaseSteps:
    llm: int = 1500
    dm: int = 3000
    vfm: int = 600
    batch: int = 32
    slot_noise: float = 0.3


def _text_example(attrs: Attributes, tok: Tokenizer, n_slot: int, rng: np.random.Generator) -> tuple:
    """(ids, ntp_mask, slot start, slot words) for one text-only pretraining sequence."""
    sp = tok.special
    kind = rng.integers(5)
    if kind == 0:
        label = attrs.shape if rng.random() < 0.5 else SHAPES[(SHAPES.index(attrs.shape) + rng.integers(1, len(SHAPES))) % len(SHAPES)]
        before, after = "", qa_caption(label, "yes" if label == attrs.shape else "no")
    elif kind == 1:
        before, after = "", describe_caption(attrs)
    elif kind == 2:
        before, after = describe_caption(attrs), ""
    elif kind == 3:
        before, after = "", object_caption(attrs)
    else:
        before, after = object_caption(attrs), ""
    pre = tok.encode(before)
    post = tok.encode(after)
    ids = pre + [sp.soi_id] + [sp.img_id] * n_slot + post
    mask = [1] * (len(pre) + 1) + [0] * n_slot + [1] * len(post)
    return ids, mask, len(pre) + 1, attribute_slot(attrs, n_slot, rng)


def _slot_embeddings(model: DEEMModel, words_batch: list, noise: float, gen: torch.Generator) -> torch.Tensor:
    tok = model.tokenizer
    ids = torch.tensor([[tok.word_id(w) for w in words] for words in words_batch])
    emb = model.decoder.tok_emb(ids)
    return emb + noise * torch.randn(emb.shape, generator=gen, dtype=emb.dtype)


def pretrain_llm(model: DEEMModel, steps: int, batch: int, rng: np.random.Generator, gen: torch.Generator, noise: float) -> list:
    dec = model.decoder
    opt = torch.optim.AdamW(dec.parameters(), lr=2e-3, weight_decay=0.01)
    combos = all_combos()
    M = model.num_visual_tokens
    losses = []
    for step in range(steps):
        exs = [_text_example(combos[rng.integers(len(combos))], model.tokenizer, M, rng) for _ in range(batch)]
        L = max(len(e[0]) for e in exs)
        ids = torch.zeros(batch, L, dtype=torch.long)
        mask = torch.zeros(batch, L, dtype=torch.long)
        for i, (x, m, _, _) in enumerate(exs):
            ids[i, : len(x)] = torch.tensor(x)
            mask[i, : len(m)] = torch.tensor(m)
        # the slot is filled with detached word embeddings, like frozen visual inputs
        with torch.no_grad():
            slots = _slot_embeddings(model, [e[3] for e in exs], noise, gen)
        E = dec.embed_tokens(ids, list(slots), [(i, e[2]) for i, e in enumerate(exs)])
        loss = ntp_loss(dec.logits(dec.decode(E)), ids, mask)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(dec.parameters(), 1.0)
        for g in opt.param_groups:
            g["lr"] = 2e-3 * min(1.0, (step + 1) / 100) * (0.5 * (1 + np.cos(np.pi * step / steps)))
        opt.step()
        losses.append(loss.item())
    return losses


def pretrain_dm(model: DEEMModel, steps: int, batch: int, rng: np.random.Generator, gen: torch.Generator, noise: float) -> list:
    dm = model.denoiser
    opt = torch.optim.AdamW(dm.parameters(), lr=2e-3, weight_decay=0.0)
    combos = all_combos()
    M = model.num_visual_tokens
    res = model.config.resolution
    losses = []
    for step in range(steps):
        samples = make_samples(combos, batch, res, rng)
        px = torch.as_tensor(np.stack([s.image.pixels for s in samples]))
        with torch.no_grad():
            cond = _slot_embeddings(model, [attribute_slot(s.attrs, M, rng) for s in samples], noise, gen)
        drop = torch.as_tensor(rng.random(batch) < 0.1)
        loss = denoising_loss(dm, model.schedule, px, DiffusionCondition(cond, "encoder_tokens"), gen, drop)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(dm.parameters(), 1.0)
        for g in opt.param_groups:
            g["lr"] = 2e-3 * min(1.0, (step + 1) / 100) * (0.5 * (1 + np.cos(np.pi * step / steps)))
        opt.step()
        losses.append(loss.item())
    return losses


class AttributeHead(nn.Module):
    """Temporary color/texture classifier on pooled encoder tokens."""

    def __init__(self, dim: int):
        super().__init__()
        self.color = nn.Linear(dim, len(COLORS))
        self.texture = nn.Linear(dim, len(TEXTURES))

    def forward(self, pooled):
        return self.color(pooled), self.texture(pooled)


def pretrain_vfm(model: DEEMModel, combos: list, steps: int, batch: int, rng: np.random.Generator) -> list:
    enc = model.encoder
    head = AttributeHead(model.config.dim)
    opt = torch.optim.AdamW(list(enc.parameters()) + list(head.parameters()), lr=1e-3)
    colors, res = list(COLORS), model.config.resolution
    losses = []
    for _ in range(steps):
        samples = make_samples(combos, batch, res, rng)
        px = torch.as_tensor(np.stack([s.image.pixels for s in samples]))
        yc = torch.tensor([colors.index(s.attrs.color) for s in samples])
        yt = torch.tensor([TEXTURES.index(s.attrs.texture) for s in samples])
        lc, lt = head(enc(px).mean(1))
        loss = F.cross_entropy(lc, yc) + F.cross_entropy(lt, yt)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def build_base_model(seed: int = 0, steps: Optional[BaseSteps] = None, config: Optional[ModelConfig] = None, train_combos=None) -> tuple:
    """Fresh model with pretrained LLM, DM and VFM groups; returns (model, loss curves)."""
    from .synth import split_combos

    steps = steps or BaseSteps()
    torch.manual_seed(seed)
    model = DEEMModel(config or toy_config(), build_tokenizer())
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    curves = {}
    log.info("pretraining toy language model for %d steps", steps.llm)
    curves["llm"] = pretrain_llm(model, steps.llm, steps.batch, rng, gen, steps.slot_noise)
    log.info("pretraining toy diffusion model for %d steps", steps.dm)
    curves["dm"] = pretrain_dm(model, steps.dm, steps.batch, rng, gen, steps.slot_noise)
    log.info("pretraining toy image encoder for %d steps", steps.vfm)
    combos = train_combos if train_combos is not None else split_combos()[0]
    curves["vfm"] = pretrain_vfm(model, combos, steps.vfm, steps.batch, rng)
    return model, curves


def load_or_build_base(path, seed: int = 0, steps: Optional[BaseSteps] = None) -> DEEMModel:
    """Cached :func:`build_base_model`; the cache file is a regular checkpoint."""
    from .training import StageConfig, load_checkpoint, save_checkpoint

    path = Path(path)
    if path.exists():
        return load_checkpoint(path)[0]
    model, curves = build_base_model(seed, steps)
    save_checkpoint(path, model, StageConfig("S1"), extra={"base_seed": seed, "curves": {k: v[-50:] for k, v in curves.items()}})
    return model
