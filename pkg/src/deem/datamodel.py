"""Interleaved documents, image records and their on-disk format.

Documents are written one JSON record per line. Pixel data and masks are
kept out of line as ``.npy`` tensor files next to the document file and
referenced by relative path plus a SHA-256 of the file bytes, so the
document file itself stays small and diff-able.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np


class DocumentError(ValueError):
    """A document (or one of its images) violates a type invariant."""


@dataclass(frozen=True, eq=False)
class ImageRecord:
    pixels: np.ndarray
    mask: Optional[np.ndarray] = None
    similarity_score: Optional[float] = None

    @property
    def shape(self) -> tuple:
        return tuple(self.pixels.shape[:2])

    def effective_mask(self) -> np.ndarray:
        """The binary mask, or all-ones when none was attached."""
        if self.mask is None:
            return np.ones(self.shape, dtype=np.float32)
        return self.mask

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        if self.similarity_score != other.similarity_score:
            return False
        if not np.array_equal(self.pixels, other.pixels):
            return False
        if (self.mask is None) != (other.mask is None):
            return False
        return self.mask is None or np.array_equal(self.mask, other.mask)

    __hash__ = None


@dataclass(frozen=True)
class TextSpan:
    text: str


Element = Union[TextSpan, ImageRecord]


@dataclass(frozen=True)
class InterleavedDocument:
    elements: tuple
    doc_id: str = ""

    def __post_init__(self):
        # accept lists for convenience but store a tuple
        object.__setattr__(self, "elements", tuple(self.elements))

    @property
    def images(self) -> list:
        return [e for e in self.elements if isinstance(e, ImageRecord)]

    @property
    def num_images(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class SpecialTokens:
    soi_id: int
    img_id: int
    eos_id: int
    pad_id: int

    def __post_init__(self):
        ids = (self.soi_id, self.img_id, self.eos_id, self.pad_id)
        if len(set(ids)) != 4:
            raise ValueError(f"special token ids must be distinct, got {ids}")


def validate_image(image: ImageRecord) -> ImageRecord:
    px = np.asarray(image.pixels)
    if px.ndim != 3 or px.shape[2] != 3:
        raise DocumentError(f"pixels must be H x W x 3, got shape {px.shape}")
    if not np.all(np.isfinite(px)):
        raise DocumentError("pixel values must be finite")
    if px.size and (px.min() < 0.0 or px.max() > 1.0):
        raise DocumentError("pixel out of range [0, 1]")
    if image.mask is not None:
        m = np.asarray(image.mask)
        if m.shape != px.shape[:2]:
            raise DocumentError(
                f"mask shape mismatch: mask {m.shape} vs pixels {px.shape[:2]}"
            )
        if not np.all((m == 0) | (m == 1)):
            raise DocumentError("mask must be binary")
    s = image.similarity_score
    if s is not None and not (-1.0 <= s <= 1.0):
        raise DocumentError(f"similarity score {s} outside [-1, 1]")
    return image


def validate_document(doc: InterleavedDocument) -> InterleavedDocument:
    """Return ``doc`` unchanged, or raise on the first violated invariant."""
    if len(doc.elements) == 0:
        raise DocumentError("empty document")
    for i, el in enumerate(doc.elements):
        if isinstance(el, ImageRecord):
            try:
                validate_image(el)
            except DocumentError as exc:
                raise DocumentError(f"element {i}: {exc}") from None
        elif not isinstance(el, TextSpan):
            raise DocumentError(f"element {i}: unknown element type {type(el).__name__}")
    return doc


def _array_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _write_tensor(arr: np.ndarray, root: Path, stem: str) -> tuple:
    data = _array_bytes(np.ascontiguousarray(arr))
    digest = hashlib.sha256(data).hexdigest()
    rel = f"{stem}.npy"
    (root / rel).parent.mkdir(parents=True, exist_ok=True)
    with open(root / rel, "wb") as fh:
        fh.write(data)
    return rel, digest


def _read_tensor(root: Path, rel: str, digest: str) -> np.ndarray:
    data = (root / rel).read_bytes()
    if hashlib.sha256(data).hexdigest() != digest:
        raise DocumentError(f"hash mismatch for tensor file {rel}")
    return np.load(io.BytesIO(data), allow_pickle=False)


def serialize_docs(docs: Iterable[InterleavedDocument], path) -> int:
    """Write ``docs`` to a line-delimited file; returns the number written.

    Image tensors go under ``<path stem>_tensors/`` beside the file.
    """
    path = Path(path)
    root = path.parent
    tensor_dir = f"{path.stem}_tensors"
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for d_idx, doc in enumerate(docs):
            elements = []
            for e_idx, el in enumerate(doc.elements):
                if isinstance(el, TextSpan):
                    elements.append({"type": "text", "text": el.text})
                    continue
                stem = f"{tensor_dir}/{d_idx:06d}_{e_idx:03d}"
                ref, digest = _write_tensor(el.pixels, root, stem)
                rec = {"type": "image", "ref": ref, "hash": digest, "sim": el.similarity_score}
                if el.mask is not None:
                    rec["mask_ref"], rec["mask_hash"] = _write_tensor(el.mask, root, stem + "_mask")
                elements.append(rec)
            fh.write(json.dumps({"doc_id": doc.doc_id, "elements": elements}, ensure_ascii=False))
            fh.write("\n")
            count += 1
    return count


def deserialize_docs(path) -> list:
    path = Path(path)
    root = path.parent
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            elements = []
            for el in rec["elements"]:
                if el["type"] == "text":
                    elements.append(TextSpan(el["text"]))
                elif el["type"] == "image":
                    pixels = _read_tensor(root, el["ref"], el["hash"])
                    mask = None
                    if "mask_ref" in el:
                        mask = _read_tensor(root, el["mask_ref"], el["mask_hash"])
                    elements.append(ImageRecord(pixels, mask, el.get("sim")))
                else:
                    raise DocumentError(f"line {lineno}: unknown element type {el['type']!r}")
            docs.append(InterleavedDocument(elements, rec.get("doc_id", "")))
    return docs


def save_png(pixels: np.ndarray, path) -> None:
    """Write an H x W x 3 float image in [0, 1] as an 8-bit PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(pixels), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(os.fspath(path))


def load_image(path) -> np.ndarray:
    """Load a ``.npy`` tensor or a common image file as float32 in [0, 1]."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path, allow_pickle=False).astype(np.float32)
    from PIL import Image

    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0
