"""Autoregressive interleaved generation.

Text tokens are sampled from the decoder. When ``<SOI>`` comes out, the
decoder context is resampled into a diffusion condition, an image is
sampled, and that image's visual tokens are written into the ``<IMG>``
run that follows before text generation resumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .datamodel import ImageRecord, InterleavedDocument, TextSpan
from .diffusion import DiffusionCondition, sample as diffusion_sample
from .model import DEEMModel
from .sequence import assemble


@dataclass
class Transcript:
    token_ids: list
    images: list  # generated pixel arrays, in order
    slots: list  # (position, visual tokens) for every image in context
    sampler_calls: int = 0
    text: str = ""
    generated: list = field(default_factory=list)  # ids produced after the prompt

    def context_embeddings(self, model: DEEMModel) -> torch.Tensor:
        ids = torch.tensor(self.token_ids)[None]
        return model.decoder.embed_tokens(ids, [t for _, t in self.slots], [(0, p) for p, _ in self.slots])[0]


def _pick(logits: torch.Tensor, temperature: float, top_k: int, gen: torch.Generator) -> int:
    if temperature <= 0:
        return int(torch.argmax(logits))
    logits = logits / temperature
    if top_k and top_k < logits.numel():
        kth = torch.topk(logits, top_k).values[-1]
        logits = logits.masked_fill(logits < kth, float("-inf"))
    probs = torch.softmax(logits, -1)
    return int(torch.multinomial(probs, 1, generator=gen))


@torch.no_grad()
def generate(
    model: DEEMModel,
    prompt: InterleavedDocument,
    max_tokens: int = 32,
    max_images: int = 1,
    temperature: float = 1.0,
    top_k: int = 50,
    guidance_scale: float = 3.0,
    diffusion_steps: Optional[int] = None,
    seed: int = 0,
    forced_tokens: Sequence[int] = (),
    stop_at_eos: bool = True,
    sampler: Optional[Callable] = None,
) -> Transcript:
    """Continue ``prompt`` for at most ``max_tokens`` tokens and ``max_images`` images.

    ``forced_tokens`` replace the first sampled tokens; ``sampler`` defaults
    to :func:`deem.diffusion.sample` and is what gets counted.
    """
    model.eval()
    sampler = sampler or diffusion_sample
    special = model.special
    M = model.num_visual_tokens
    gen = torch.Generator().manual_seed(seed)
    img_gen = torch.Generator().manual_seed(seed + 1)
    res = model.config.resolution

    seq = assemble(prompt, model.tokenizer, special, M)
    ids = [int(i) for i in seq.token_ids]
    slots = []
    if seq.image_entries:
        px, masks = model.images_to_tensor([e.image for e in seq.image_entries])
        vis = model.visual_tokens(px, masks)
        slots = [(pos, vis[k]) for pos, k in seq.embedding_slots]
    tr = Transcript(ids, [], slots)
    forced = list(forced_tokens)
    produced = 0
    while produced < max_tokens:
        if len(tr.token_ids) + 1 + M > model.decoder.max_len:
            break
        E = tr.context_embeddings(model)
        states = model.decoder.decode(E)
        nxt = forced.pop(0) if forced else _pick(model.decoder.logits(states[-1]), temperature, top_k, gen)
        if nxt == special.img_id:
            # placeholders are written by the protocol, never sampled
            nxt = special.soi_id
        if nxt == special.soi_id and len(tr.images) >= max_images:
            break
        tr.token_ids.append(nxt)
        tr.generated.append(nxt)
        produced += 1
        if nxt == special.eos_id and stop_at_eos:
            break
        if nxt != special.soi_id:
            continue
        # hidden state at <SOI> sees the full context preceding the image
        states = model.decoder.decode(tr.context_embeddings(model))
        cond_tokens = model.connectors.resample(states[None], "llm_side")
        cond = DiffusionCondition(cond_tokens, "llm_context")
        image = sampler(model.denoiser, model.schedule, cond, (1, res, res, 3), diffusion_steps, guidance_scale, img_gen)
        tr.sampler_calls += 1
        tr.images.append(image[0].numpy())
        vis = model.visual_tokens(image.to(E.dtype))
        tr.slots.append((len(tr.token_ids), vis[0]))
        tr.token_ids.extend([special.img_id] * M)
    tr.text = model.tokenizer.decode(tr.generated)
    return tr


def transcript_document(tr: Transcript, model: DEEMModel) -> InterleavedDocument:
    """Split a transcript's generated part into text spans and images."""
    special = model.special
    elements, buf = [], []
    images = iter(tr.images)
    for t in tr.generated:
        if t == special.soi_id:
            if buf:
                elements.append(TextSpan(model.tokenizer.decode(buf)))
                buf = []
            img = next(images, None)
            if img is not None:
                elements.append(ImageRecord(np.clip(img, 0, 1).astype(np.float32)))
        elif t != special.eos_id:
            buf.append(t)
    if buf:
        elements.append(TextSpan(model.tokenizer.decode(buf)))
    return InterleavedDocument(elements or [TextSpan("")], "generated")


@torch.no_grad()
def answer_question(model: DEEMModel, image: ImageRecord, question: str, max_tokens: int = 3) -> str:
    """Greedy answer to ``question`` about ``image`` (image first, then the question)."""
    tr = generate(
        model,
        InterleavedDocument([image, TextSpan(question)]),
        max_tokens=max_tokens,
        max_images=0,
        temperature=0.0,
    )
    return tr.text
