"""Consistency-loss ablation on synthetic shapes.

Two stage-I runs start from the same pretrained toy base and the same seed;
they differ only in the weight on the consistency term. Both are then
asked yes/no shape questions about out-of-distribution images (held-out
color/texture combinations), with the "no" question built from a mined
hard negative.

Training captions name color and texture but never the shape. Whatever the
tuned encoder learns about shape therefore has to come from the diffusion
feedback, which is the regime the consistency term is meant for.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .base import describe_caption, object_caption
from .datamodel import ImageRecord
from .generation import answer_question
from .model import DEEMModel
from .robustvqa import LabeledImage, build_benchmark, evaluate, parse_answer
from .sequence import pair_to_document
from .synth import SHAPES, make_samples, split_combos
from .training import desk_stage, load_checkpoint, run_stage

log = logging.getLogger(__name__)


@dataclass
class AblationConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    steps: int = 2000
    batch_size: int = 16
    max_len: int = 48
    n_train: int = 3000
    n_ood: int = 100
    n_prototype: int = 200
    data_seed: int = 1234
    shape_caption_prob: float = 0.0
    n_off: int = 1
    lr_groups: dict = field(default_factory=lambda: {"encoder_decoder": 3e-4, "others": 1e-3})
    warmup_steps: int = 50


def stage1_documents(samples: list, rng: np.random.Generator, shape_caption_prob: float = 0.0) -> list:
    docs = []
    for i, s in enumerate(samples):
        caption = describe_caption(s.attrs) if rng.random() < shape_caption_prob else object_caption(s.attrs)
        # object masks are dropped: the whole frame is the region of interest
        docs.append(pair_to_document(caption, ImageRecord(s.image.pixels), rng, doc_id=f"s1_{i:06d}"))
    return docs


@torch.no_grad()
def pooled_features(model: DEEMModel, images: list) -> np.ndarray:
    px = torch.as_tensor(np.stack([im.pixels for im in images]))
    return model.encoder(px).mean(1).numpy()


def shape_prototypes(model: DEEMModel, samples: list) -> dict:
    """Mean pooled encoder feature per shape label."""
    feats = pooled_features(model, [s.image for s in samples])
    labels = np.array([s.attrs.shape for s in samples])
    return {s: feats[labels == s].mean(0) for s in SHAPES if np.any(labels == s)}


def ood_benchmark(base: DEEMModel, cfg: AblationConfig) -> tuple:
    """(items, image lookup, ood samples); negatives mined with the base encoder."""
    rng = np.random.default_rng(cfg.data_seed + 1)
    train_c, ood_c = split_combos(cfg.n_off)
    res = base.config.resolution
    protos = shape_prototypes(base, make_samples(train_c, cfg.n_prototype, res, rng))
    ood = make_samples(ood_c, cfg.n_ood, res, rng)
    feats = pooled_features(base, [s.image for s in ood])
    labeled = [LabeledImage(f"ood{i:04d}", s.attrs.shape, feats[i]) for i, s in enumerate(ood)]
    images = {li.image_ref: ImageRecord(s.image.pixels) for li, s in zip(labeled, ood)}
    return build_benchmark(labeled, protos, "yesno"), images, ood


def answer_benchmark(model: DEEMModel, items: list, images: dict) -> dict:
    return {it.item_id: parse_answer(answer_question(model, images[it.image_ref], it.question, max_tokens=2)) for it in items}


def train_arm(base_path, docs: list, seed: int, csr_scale: float, cfg: AblationConfig) -> tuple:
    """One stage-I run from the cached base; connectors are freshly initialised from ``seed``."""
    base, payload = load_checkpoint(base_path)
    torch.manual_seed(seed)
    model = DEEMModel(base.config, base.tokenizer)
    model.load_state_groups(payload["groups"], only=("VFM", "LLM", "DM"))
    stage = desk_stage(
        "S1",
        total_steps=cfg.steps,
        batch_size=cfg.batch_size,
        max_len=cfg.max_len,
        warmup_steps=cfg.warmup_steps,
        lr_groups=dict(cfg.lr_groups),
        csr_scale=csr_scale,
    )
    _, records = run_stage(model, docs, stage, seed=seed)
    return model, records


def run_ablation(base_path, cfg: Optional[AblationConfig] = None, report=print, keep_models: bool = False) -> dict:
    """Both arms for every seed; returns per-seed accuracies and the win count.

    With ``keep_models`` the trained models are returned under
    ``"models"``, keyed by ``(seed, arm)``.
    """
    cfg = cfg or AblationConfig()
    base, _ = load_checkpoint(base_path)
    items, images, _ = ood_benchmark(base, cfg)
    rng = np.random.default_rng(cfg.data_seed)
    train_c, _ = split_combos(cfg.n_off)
    docs = stage1_documents(make_samples(train_c, cfg.n_train, base.config.resolution, rng), rng, cfg.shape_caption_prob)
    results, models = [], {}
    for seed in cfg.seeds:
        row = {"seed": seed}
        for arm, scale in (("csr_on", 1.0), ("csr_off", 0.0)):
            t0 = time.time()
            model, records = train_arm(base_path, docs, seed, scale, cfg)
            rep = evaluate(items, answer_benchmark(model, items, images))
            row[arm] = rep["accuracy"]
            row[arm + "_report"] = {k: v for k, v in rep.items() if k != "accuracy"}
            row[arm + "_final_losses"] = records[-1] if records else None
            if keep_models:
                models[(seed, arm)] = model
            report(f"seed {seed} {arm}: accuracy {rep['accuracy']:.3f} ({time.time() - t0:.0f}s)")
        results.append(row)
    wins = sum(r["csr_on"] >= r["csr_off"] for r in results)
    out = {"config": asdict(cfg), "runs": results, "wins": wins, "n_items": len(items)}
    if keep_models:
        out["models"] = models
    return out
