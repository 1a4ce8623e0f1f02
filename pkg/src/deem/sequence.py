"""From interleaved documents to packed decoder sequences.

Every image becomes one ``<SOI>`` token followed by a run of ``<IMG>``
placeholders whose embeddings are later overwritten by the image's visual
tokens. Documents are filtered, turned into fragments, and fragments are
packed greedily in order up to the context length.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .datamodel import DocumentError, ImageRecord, InterleavedDocument, SpecialTokens, TextSpan

SIM_THRESHOLD = 0.24
MAX_IMAGES_PER_DOC = 6
SINGLE_IMAGE_KEEP_PROB = 0.5
MIN_CAPTION_CHARS = 10
DEFAULT_MAX_LEN = 2048
CFG_DROP_PROB = 0.1

_PIECE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class Tokenizer:
    """Word-level tokenizer with UTF-8 byte fallback.

    Ids 0-3 are pad, eos, ``<SOI>``, ``<IMG>``; the next 256 ids are raw
    bytes; known words follow.
    """

    N_SPECIAL = 4
    N_BYTES = 256

    def __init__(self, words: Iterable[str] = ()):
        self.words = []
        self._index = {}
        for w in words:
            if w not in self._index:
                self._index[w] = len(self.words)
                self.words.append(w)
        self.special = SpecialTokens(soi_id=2, img_id=3, eos_id=1, pad_id=0)

    @classmethod
    def from_corpus(cls, texts: Iterable[str], max_words: Optional[int] = None) -> "Tokenizer":
        counts = {}
        for t in texts:
            for piece in _PIECE.findall(t):
                counts[piece] = counts.get(piece, 0) + 1
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ranked[:max_words] if max_words else ranked)

    @property
    def vocab_size(self) -> int:
        return self.N_SPECIAL + self.N_BYTES + len(self.words)

    def word_id(self, word: str) -> Optional[int]:
        idx = self._index.get(word)
        return None if idx is None else self.N_SPECIAL + self.N_BYTES + idx

    def encode(self, text: str) -> list:
        ids = []
        for piece in _PIECE.findall(text):
            wid = self.word_id(piece)
            if wid is not None:
                ids.append(wid)
            else:
                ids.extend(self.N_SPECIAL + b for b in piece.encode("utf-8"))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out, pending = [], bytearray()
        names = {self.special.soi_id: "<SOI>", self.special.img_id: "<IMG>", self.special.eos_id: "<EOS>"}

        def flush():
            if pending:
                out.append(pending.decode("utf-8", errors="replace"))
                pending.clear()

        for i in ids:
            i = int(i)
            if i == self.special.pad_id:
                continue
            if self.N_SPECIAL <= i < self.N_SPECIAL + self.N_BYTES:
                pending.append(i - self.N_SPECIAL)
                continue
            flush()
            out.append(names[i] if i in names else self.words[i - self.N_SPECIAL - self.N_BYTES])
        flush()
        return " ".join(out)

    def to_dict(self) -> dict:
        return {"words": list(self.words)}

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        return cls(d["words"])


@dataclass
class ImageEntry:
    image: ImageRecord
    is_first_in_sequence: bool
    condition_dropped: bool = False


@dataclass
class PackedSequence:
    token_ids: np.ndarray
    embedding_slots: list  # (position of first <IMG>, image index)
    ntp_mask: np.ndarray
    image_entries: list = field(default_factory=list)
    soi_positions: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)


def filter_interleaved(doc: InterleavedDocument, rng: np.random.Generator) -> Optional[InterleavedDocument]:
    """Apply the interleaved-corpus image filtering rules.

    Images scoring below 0.24 go, at most 6 survive (highest scores,
    document order preserved), image-free documents are dropped and
    single-image documents are dropped half of the time.
    """
    scored = []
    for i, el in enumerate(doc.elements):
        if isinstance(el, ImageRecord):
            if el.similarity_score is None:
                raise DocumentError(f"image at element {i} of {doc.doc_id!r} has no similarity score")
            if el.similarity_score >= SIM_THRESHOLD:
                scored.append((el.similarity_score, i))
    keep = {i for _, i in sorted(scored, key=lambda p: (-p[0], p[1]))[:MAX_IMAGES_PER_DOC]}
    elements = [
        el for i, el in enumerate(doc.elements) if not isinstance(el, ImageRecord) or i in keep
    ]
    if not keep:
        return None
    if len(keep) == 1 and rng.random() >= SINGLE_IMAGE_KEEP_PROB:
        return None
    return InterleavedDocument(elements, doc.doc_id)


def keep_caption(caption: str, min_chars: int = MIN_CAPTION_CHARS) -> bool:
    """Pair captions shorter than ``min_chars`` characters are filtered out."""
    return len(caption.strip()) >= min_chars


def pair_to_document(
    caption: str, image: ImageRecord, rng: np.random.Generator, doc_id: str = ""
) -> InterleavedDocument:
    """Image before the caption with probability 0.5, after it otherwise."""
    if not caption:
        raise ValueError("caption must be nonempty")
    if rng.random() < 0.5:
        return InterleavedDocument([image, TextSpan(caption)], doc_id)
    return InterleavedDocument([TextSpan(caption), image], doc_id)


def assemble(
    doc: InterleavedDocument,
    tokenizer: Tokenizer,
    special: Optional[SpecialTokens] = None,
    num_visual_tokens: int = 8,
    append_eos: bool = False,
) -> PackedSequence:
    special = special or tokenizer.special
    ids, mask, slots, entries, sois = [], [], [], [], []
    for el in doc.elements:
        if isinstance(el, TextSpan):
            toks = tokenizer.encode(el.text)
            ids += toks
            mask += [1] * len(toks)
        else:
            sois.append(len(ids))
            entries.append(ImageEntry(el, is_first_in_sequence=len(ids) == 0))
            ids.append(special.soi_id)
            mask.append(1)  # <SOI> is supervised so generation can emit it
            slots.append((len(ids), len(entries) - 1))
            ids += [special.img_id] * num_visual_tokens
            mask += [0] * num_visual_tokens
    if append_eos:
        ids.append(special.eos_id)
        mask.append(1)
    return PackedSequence(
        np.asarray(ids, dtype=np.int64), slots, np.asarray(mask, dtype=np.int64), entries, sois
    )


def pack(fragments: Sequence[PackedSequence], max_len: int = DEFAULT_MAX_LEN) -> list:
    """Greedy in-order concatenation; a fragment that would overflow starts a new pack."""
    for i, f in enumerate(fragments):
        if len(f) > max_len:
            raise ValueError(f"fragment {i} has length {len(f)} > max_len {max_len}")
    groups, cur, cur_len = [], [], 0
    for f in fragments:
        if cur and cur_len + len(f) > max_len:
            groups.append(cur)
            cur, cur_len = [], 0
        cur.append(f)
        cur_len += len(f)
    if cur:
        groups.append(cur)
    return [_concat(g) for g in groups]


def _concat(frags: list) -> PackedSequence:
    ids, mask, slots, entries, sois = [], [], [], [], []
    offset = 0
    for f in frags:
        base = len(entries)
        ids.append(f.token_ids)
        mask.append(f.ntp_mask)
        slots += [(p + offset, k + base) for p, k in f.embedding_slots]
        sois += [p + offset for p in f.soi_positions]
        for e, soi in zip(f.image_entries, f.soi_positions):
            entries.append(replace(e, is_first_in_sequence=soi + offset == 0))
        offset += len(f)
    return PackedSequence(np.concatenate(ids), slots, np.concatenate(mask), entries, sois)


def mark_condition_dropout(
    seq: PackedSequence, p: float = CFG_DROP_PROB, rng: Optional[np.random.Generator] = None
) -> PackedSequence:
    """Flag non-first images whose generation condition is replaced by the null one."""
    rng = rng if rng is not None else np.random.default_rng()
    entries = []
    for e in seq.image_entries:
        dropped = False if e.is_first_in_sequence else bool(rng.random() < p)
        entries.append(replace(e, condition_dropped=dropped))
    return replace(seq, image_entries=entries)


def sample_mixture(sources: dict, weights: dict, n: int, rng: np.random.Generator) -> list:
    """Draw ``n`` items, choosing the source in proportion to ``weights``."""
    names = [k for k in sources if len(sources[k])]
    w = np.asarray([weights.get(k, 1.0) for k in names], dtype=float)
    picks = rng.choice(len(names), size=n, p=w / w.sum())
    out = []
    for k in picks:
        pool = sources[names[k]]
        out.append(pool[rng.integers(len(pool))])
    return out


@dataclass
class Batch:
    """Right-padded tensors for a list of packed sequences."""

    token_ids: torch.Tensor  # B x L
    ntp_mask: torch.Tensor  # B x L
    lengths: list
    sequences: list

    @property
    def images(self) -> list:
        """(batch row, slot position, soi position, entry) for every image in order."""
        out = []
        for b, seq in enumerate(self.sequences):
            for (pos, k), soi in zip(seq.embedding_slots, seq.soi_positions):
                out.append((b, pos, soi, seq.image_entries[k]))
        return out


def collate(seqs: Sequence[PackedSequence], pad_id: int = 0) -> Batch:
    L = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), L), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), L), dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.from_numpy(s.token_ids)
        mask[i, : len(s)] = torch.from_numpy(s.ntp_mask)
    return Batch(ids, mask, [len(s) for s in seqs], list(seqs))
