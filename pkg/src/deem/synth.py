"""Synthetic shapes: labelled images with a held-out attribute split.

Each image shows one shape with a color and a texture on a light
background. Every shape has a "home" color it is usually drawn in during
training; the out-of-distribution split uses only (shape, color, texture)
combinations that never occur in training.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .datamodel import ImageRecord, InterleavedDocument, serialize_docs
from .robustvqa import YESNO_TEMPLATE
from .sequence import pair_to_document

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.7, 0.2),
    "blue": (0.15, 0.3, 0.9),
    "yellow": (0.9, 0.8, 0.1),
}
TEXTURES = ("solid", "striped")
BACKGROUND = 0.92


@dataclass(frozen=True)
class Attributes:
    shape: str
    color: str
    texture: str

    @property
    def key(self) -> tuple:
        return (self.shape, self.color, self.texture)

    def description(self) -> str:
        return f"{self.color} {self.texture} {self.shape}"


def all_combos() -> list:
    return [Attributes(s, c, t) for s, c, t in itertools.product(SHAPES, COLORS, TEXTURES)]


def split_combos(n_off: int = 1) -> tuple:
    """(train, ood) combination lists; disjoint and jointly exhaustive.

    Training keeps each shape in its home color with every texture, plus
    ``n_off`` other colors in the first texture only.
    """
    colors = list(COLORS)
    train = []
    for i, s in enumerate(SHAPES):
        home = colors[i % len(colors)]
        train += [Attributes(s, home, t) for t in TEXTURES]
        for k in range(1, n_off + 1):
            train.append(Attributes(s, colors[(i + k) % len(colors)], TEXTURES[0]))
    keys = {a.key for a in train}
    ood = [a for a in all_combos() if a.key not in keys]
    return train, ood


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx**2 + dy**2 <= r**2
    if shape == "square":
        s = r * 0.85
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "triangle":
        # apex up, base at cy + r * 0.8
        top, bot = cy - r, cy + r * 0.8
        frac = (yy - top) / (bot - top)
        return (yy >= top) & (yy <= bot) & (np.abs(dx) <= frac * r)
    if shape == "cross":
        arm = r * 0.35
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def render(attrs: Attributes, size: int = 32, rng: Optional[np.random.Generator] = None) -> tuple:
    """(pixels H x W x 3 float32 in [0, 1], binary object mask)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    r = size * rng.uniform(0.28, 0.38)
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    cy = size / 2 + rng.uniform(-0.08, 0.08) * size
    mask = _shape_mask(attrs.shape, size, cx, cy, r)
    color = np.asarray(COLORS[attrs.color]) * rng.uniform(0.9, 1.05)
    fill = np.broadcast_to(color, (size, size, 3)).copy()
    if attrs.texture == "striped":
        period = max(2, size // 8)
        yy, xx = np.mgrid[0:size, 0:size]
        stripes = ((xx + yy) // (period // 2 if period > 2 else 1)) % 2 == 0
        fill[stripes] = fill[stripes] * 0.35 + 0.65 * BACKGROUND
    img = np.full((size, size, 3), BACKGROUND)
    img[mask] = fill[mask]
    img += rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask.astype(np.float32)


def qa_caption(label: str, answer: str) -> str:
    return f"{YESNO_TEMPLATE.format(label=label)} {answer}"


def describe_caption(attrs: Attributes) -> str:
    return f"a {attrs.description()}"


@dataclass
class SynthSample:
    attrs: Attributes
    image: ImageRecord


def make_samples(combos: list, n: int, size: int, rng: np.random.Generator) -> list:
    out = []
    for _ in range(n):
        a = combos[rng.integers(len(combos))]
        px, mask = render(a, size, rng)
        out.append(SynthSample(a, ImageRecord(px, mask)))
    return out


def caption_for(sample: SynthSample, rng: np.random.Generator, qa_prob: float = 0.5) -> str:
    """Either a plain description or a yes/no question with its answer (half of them negative)."""
    if rng.random() >= qa_prob:
        return describe_caption(sample.attrs)
    if rng.random() < 0.5:
        return qa_caption(sample.attrs.shape, "yes")
    others = [s for s in SHAPES if s != sample.attrs.shape]
    return qa_caption(others[rng.integers(len(others))], "no")


def train_documents(samples: list, rng: np.random.Generator, qa_prob: float = 0.5) -> list:
    return [
        pair_to_document(caption_for(s, rng, qa_prob), s.image, rng, doc_id=f"train{i:06d}")
        for i, s in enumerate(samples)
    ]


def vocabulary_texts() -> list:
    """Every caption/question string the synthetic world can produce."""
    texts = [describe_caption(a) for a in all_combos()]
    texts += [qa_caption(s, ans) for s in SHAPES for ans in ("yes", "no")]
    return texts


def generate_dataset(n_train: int, n_ood: int, seed: int, out, size: int = 32, n_off: int = 1) -> dict:
    """Write train documents, the OOD labelled set and a manifest under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    train_c, ood_c = split_combos(n_off)
    train = make_samples(train_c, n_train, size, rng)
    ood = make_samples(ood_c, n_ood, size, rng)
    n_docs = serialize_docs(train_documents(train, rng), out / "train.jsonl")
    serialize_docs(
        [InterleavedDocument([s.image], f"ood{i:06d}") for i, s in enumerate(ood)], out / "ood_images.jsonl"
    )
    with open(out / "ood_labels.jsonl", "w") as fh:
        for i, s in enumerate(ood):
            fh.write(json.dumps({"image_ref": f"ood{i:06d}", "gt_label": s.attrs.shape, "color": s.attrs.color, "texture": s.attrs.texture}) + "\n")
    manifest = {
        "seed": seed,
        "n_train": n_docs,
        "n_ood": len(ood),
        "size": size,
        "train_combos": [a.key for a in train_c],
        "ood_combos": [a.key for a in ood_c],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def pixel_embedding(pixels: np.ndarray, cells: int = 8) -> np.ndarray:
    """Model-free image descriptor: block-averaged, mean-centred pixels."""
    h, w, _ = pixels.shape
    v = pixels.reshape(cells, h // cells, cells, w // cells, 3).mean(axis=(1, 3)).ravel()
    return (v - v.mean()).astype(np.float32)


def write_pixel_embeddings(out, seed: int, n_prototype: int = 200, n_off: int = 1) -> Path:
    """Embeddings file for the OOD split: per-image descriptors plus per-shape prototypes.

    Prototypes average the descriptor over freshly rendered training-split
    images, so mining sees only training-distribution appearance.
    """
    from .datamodel import deserialize_docs

    out = Path(out)
    docs = deserialize_docs(out / "ood_images.jsonl")
    size = docs[0].images[0].pixels.shape[0]
    rng = np.random.default_rng([seed, 1])
    train_c, _ = split_combos(n_off)
    protos = make_samples(train_c, n_prototype, size, rng)
    feats = np.stack([pixel_embedding(s.image.pixels) for s in protos])
    shapes = np.array([s.attrs.shape for s in protos])
    labels = [s for s in SHAPES if np.any(shapes == s)]
    path = out / "ood_embeddings.npz"
    np.savez(
        path,
        labels=np.array(labels),
        label_vectors=np.stack([feats[shapes == s].mean(0) for s in labels]),
        image_refs=np.array([d.doc_id for d in docs]),
        image_vectors=np.stack([pixel_embedding(d.images[0].pixels) for d in docs]),
    )
    return path
