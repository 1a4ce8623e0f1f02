"""Causal multimodal decoder and the next-text-prediction loss."""

from __future__ import annotations

import warnings
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .layers import FeedForward, MultiHeadAttention

# number of ntp_loss calls that saw no supervised position
empty_mask_count = 0


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.ff = FeedForward(dim)

    def forward(self, x: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        x = x + self.attn(self.norm(x), key_mask=key_mask, causal=True)
        return x + self.ff(x)


class CausalDecoder(nn.Module):
    """Small decoder-only transformer standing in for the language model."""

    def __init__(
        self,
        vocab_size: int,
        dim: int = 128,
        layers: int = 4,
        heads: int = 4,
        max_len: int = 2048,
        tie_head: bool = False,
    ):
        super().__init__()
        self.dim = dim
        self.max_len = max_len
        self.tok_emb = nn.Embedding(vocab_size, dim)
        self.pos_emb = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.blocks = nn.ModuleList([DecoderBlock(dim, heads) for _ in range(layers)])
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, vocab_size, bias=False)
        if tie_head:
            self.head.weight = self.tok_emb.weight

    @property
    def vocab_size(self) -> int:
        return self.tok_emb.num_embeddings

    def embed_tokens(
        self,
        token_ids: Tensor,
        image_tokens: Sequence[Tensor] = (),
        slots: Sequence[tuple] = (),
    ) -> Tensor:
        """Word embeddings with ``<IMG>`` runs overwritten by visual tokens.

        ``slots`` holds one ``(row, position)`` per image in ``image_tokens``.
        """
        if len(image_tokens) != len(slots):
            raise ValueError(
                f"{len(slots)} image slots but {len(image_tokens)} image embeddings"
            )
        E = self.tok_emb(token_ids)
        if not slots:
            return E
        E = E.clone()
        for (row, pos), tok in zip(slots, image_tokens):
            E[row, pos : pos + tok.shape[0]] = tok.to(E.dtype)
        return E

    def embed_sequence(self, seq, image_embeddings: Sequence[Tensor]) -> Tensor:
        """K x C input embeddings for one packed sequence."""
        if len(image_embeddings) != len(seq.embedding_slots):
            raise ValueError(
                f"{len(seq.embedding_slots)} slots but {len(image_embeddings)} image embeddings"
            )
        ids = torch.as_tensor(seq.token_ids, device=self.tok_emb.weight.device)[None]
        slots = [(0, pos) for pos, _ in seq.embedding_slots]
        tokens = [
            getattr(image_embeddings[k], "tokens", image_embeddings[k]) for _, k in seq.embedding_slots
        ]
        return self.embed_tokens(ids, tokens, slots)[0]

    def decode(self, E: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        """Causal hidden states, same leading shape as ``E``."""
        squeeze = E.ndim == 2
        if squeeze:
            E = E[None]
        k = E.shape[1]
        if k < 1:
            raise ValueError("decode needs at least one position")
        if k > self.max_len:
            raise ValueError(f"sequence length {k} exceeds max_len {self.max_len}")
        x = E + self.pos_emb[:k].to(E.dtype)
        for blk in self.blocks:
            x = blk(x, key_mask)
        x = self.norm(x)
        return x[0] if squeeze else x

    def logits(self, states: Tensor) -> Tensor:
        return self.head(states)


def ntp_loss(logits: Tensor, token_ids: Tensor, ntp_mask: Tensor) -> Tensor:
    """Mean next-token cross-entropy over supervised positions.

    ``logits[..., i, :]`` predicts ``token_ids[..., i + 1]``; position
    ``i`` contributes when ``ntp_mask[..., i] == 1`` and ``i >= 1``. With no
    supervised position the loss is 0 (graph-connected) and
    ``empty_mask_count`` is bumped.
    """
    global empty_mask_count
    if logits.ndim == 2:
        logits, token_ids, ntp_mask = logits[None], token_ids[None], ntp_mask[None]
    pred = logits[:, :-1]
    target = token_ids[:, 1:]
    m = ntp_mask[:, 1:].to(torch.bool)
    n = int(m.sum())
    if n == 0:
        empty_mask_count += 1
        warnings.warn("ntp_loss called with an all-zero mask", RuntimeWarning, stacklevel=2)
        return logits.sum() * 0.0
    return F.cross_entropy(pred[m], target[m], reduction="mean")


def ntp_count(ntp_mask: Tensor) -> int:
    return int(ntp_mask[..., 1:].sum())
