"""Yes/no robustness benchmark: hard-negative mining, prompt rendering, answer parsing, scoring."""

from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

YESNO_TEMPLATE = "Is {label} the main object in this image? Please answer yes or no."
MC_QUESTION = "What is the main object in this image?"
MC_CHOICES = "Chose from the list: [{first},{second}]."
FORMATS = ("yesno", "multichoice")
ORDERS = ("gt_first", "neg_first")
UNKNOWN = "unknown"


class MissingAnswersError(KeyError):
    def __init__(self, missing: Sequence[str]):
        super().__init__(f"no answer for items: {', '.join(missing)}")
        self.missing = list(missing)


@dataclass
class LabeledImage:
    image_ref: str
    gt_label: str
    embedding: Optional[np.ndarray] = None
    image: object = None  # optional ImageRecord


@dataclass
class BenchmarkItem:
    item_id: str
    image_ref: str
    question: str
    gold: str  # "yes"/"no" for yesno, the gt label for multichoice
    gt_label: str
    neg_label: str
    format: str = "yesno"
    order: Optional[str] = None
    choices: Optional[list] = None

    def to_record(self) -> dict:
        rec = asdict(self)
        return {k: v for k, v in rec.items() if v is not None}

    @classmethod
    def from_record(cls, rec: dict) -> "BenchmarkItem":
        return cls(**rec)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


def mine_hard_negative(item: LabeledImage, label_embeddings: dict) -> str:
    """Most image-similar label other than the ground truth (cosine)."""
    if len(label_embeddings) < 2:
        raise ValueError("need at least two labels to mine a negative")
    if item.embedding is None:
        raise ValueError(f"{item.image_ref}: no image embedding")
    if item.gt_label not in label_embeddings:
        raise KeyError(f"ground-truth label {item.gt_label!r} has no embedding")
    labels = [k for k in label_embeddings if k != item.gt_label]
    L = np.stack([np.asarray(label_embeddings[k], dtype=np.float64) for k in labels])
    e = np.asarray(item.embedding, dtype=np.float64)
    sims = (L @ e) / (np.linalg.norm(L, axis=1) * np.linalg.norm(e) + 1e-12)
    return labels[int(np.argmax(sims))]


def render_yesno(image_ref: str, label: str, gold: str, item_id: str = "", gt_label: str = "", neg_label: str = "") -> BenchmarkItem:
    if not label:
        raise ValueError("label must be nonempty")
    if gold not in ("yes", "no"):
        raise ValueError(f"gold must be yes or no, got {gold!r}")
    return BenchmarkItem(
        item_id or f"{image_ref}:{label}",
        image_ref,
        YESNO_TEMPLATE.format(label=label),
        gold,
        gt_label or (label if gold == "yes" else ""),
        neg_label or (label if gold == "no" else ""),
        "yesno",
    )


def build_pair(image_ref: str, gt_label: str, neg_label: str) -> list:
    """Positive question about the true label, negative about the mined one."""
    return [
        render_yesno(image_ref, gt_label, "yes", f"{image_ref}:pos", gt_label, neg_label),
        render_yesno(image_ref, neg_label, "no", f"{image_ref}:neg", gt_label, neg_label),
    ]


def render_multichoice(image_ref: str, gt_label: str, neg_label: str, order: str = "gt_first") -> BenchmarkItem:
    if gt_label == neg_label:
        raise ValueError("multiple-choice labels must differ")
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    choices = [gt_label, neg_label] if order == "gt_first" else [neg_label, gt_label]
    question = MC_QUESTION + " " + MC_CHOICES.format(first=choices[0], second=choices[1])
    return BenchmarkItem(
        f"{image_ref}:mc:{order}", image_ref, question, gt_label, gt_label, neg_label, "multichoice", order, choices
    )


def build_benchmark(items: Iterable[LabeledImage], label_embeddings: dict, fmt: str = "yesno") -> list:
    """``fmt`` is yesno, multichoice-gt-first or multichoice-neg-first."""
    out = []
    for li in items:
        neg = mine_hard_negative(li, label_embeddings)
        if fmt == "yesno":
            out += build_pair(li.image_ref, li.gt_label, neg)
        elif fmt in ("multichoice-gt-first", "multichoice-neg-first"):
            order = "gt_first" if fmt.endswith("gt-first") else "neg_first"
            out.append(render_multichoice(li.image_ref, li.gt_label, neg, order))
        else:
            raise ValueError(f"unknown format {fmt!r}")
    return out


_WORD = re.compile(r"[a-z]+")


def parse_answer(model_output: str, fmt: str = "yesno", choices: Optional[Sequence[str]] = None):
    """yes / no / unknown for yesno; the index of the first mentioned choice (or unknown)."""
    text = model_output.lower()
    if fmt == "yesno":
        for w in _WORD.findall(text):
            if w in ("yes", "no"):
                return w
        return UNKNOWN
    if not choices:
        raise ValueError("multichoice parsing needs the choice list")
    best, best_pos = UNKNOWN, None
    for i, c in enumerate(choices):
        m = re.search(r"\b" + re.escape(c.lower()) + r"\b", text)
        if m and (best_pos is None or m.start() < best_pos):
            best, best_pos = i, m.start()
    return best


def is_correct(item: BenchmarkItem, answer) -> bool:
    if answer == UNKNOWN:
        return False
    if item.format == "yesno":
        return answer == item.gold
    return item.choices[answer] == item.gold


def evaluate(items: Sequence[BenchmarkItem], answers: dict) -> dict:
    """Accuracy overall and split by format, polarity and choice order."""
    if not items:
        raise ValueError("accuracy undefined for an empty benchmark")
    missing = [it.item_id for it in items if it.item_id not in answers]
    if missing:
        raise MissingAnswersError(missing)
    splits = defaultdict(lambda: [0, 0])
    for it in items:
        ok = is_correct(it, answers[it.item_id])
        keys = ["overall", f"format:{it.format}"]
        if it.format == "yesno":
            keys.append("positive" if it.gold == "yes" else "negative")
        else:
            keys.append(f"order:{it.order}")
        for k in keys:
            splits[k][0] += int(ok)
            splits[k][1] += 1
    report = {k: {"correct": c, "total": n, "accuracy": c / n} for k, (c, n) in sorted(splits.items())}
    report["accuracy"] = report["overall"]["accuracy"]
    return report


def write_benchmark(items: Sequence[BenchmarkItem], path) -> int:
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            fh.write(json.dumps(it.to_record()) + "\n")
    return len(items)


def read_benchmark(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [BenchmarkItem.from_record(json.loads(l)) for l in fh if l.strip()]


def read_answers(path, items: Sequence[BenchmarkItem]) -> dict:
    """Parse an answers file of {item_id, raw_output} records against ``items``."""
    by_id = {it.item_id: it for it in items}
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            it = by_id.get(rec["item_id"])
            if it is None:
                continue
            out[it.item_id] = parse_answer(rec["raw_output"], it.format, it.choices)
    return out
