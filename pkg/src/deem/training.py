"""Three-stage training: stage objectives, freezing, the optimisation step and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .diffusion import DiffusionCondition, csr_loss, nip_loss
from .lm import ntp_count, ntp_loss
from .model import GROUPS, DEEMModel, ModelConfig
from .rng import RngStreams
from .sequence import (
    CFG_DROP_PROB,
    DEFAULT_MAX_LEN,
    Batch,
    assemble,
    collate,
    mark_condition_dropout,
    pack,
)

log = logging.getLogger(__name__)

STAGES = ("S1", "S2", "S3")
LR_GROUP_OF = {"VFM": "encoder_decoder", "DM": "encoder_decoder", "LLM": "language_model", "connectors": "others"}


class NumericError(RuntimeError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss: {value}")
        self.component = component


@dataclass
class StageConfig:
    stage: str = "S1"
    lam: float = 5.0
    lr_groups: dict = field(default_factory=lambda: {"encoder_decoder": 2e-5, "others": 1e-4})
    freeze: dict = field(default_factory=lambda: {"VFM": False, "LLM": True, "DM": True})
    warmup_steps: int = 1000
    total_steps: int = 10000
    batch_size: int = 4
    betas: tuple = (0.9, 0.995)
    eps: float = 1e-6
    weight_decay: float = 0.05
    input_resolution: int = 256
    grad_clip: float = 1.0
    p_drop: float = CFG_DROP_PROB
    max_len: int = DEFAULT_MAX_LEN
    # consistency ablation: scale on the CSR term, and whether to compute it at all
    csr_scale: float = 1.0
    compute_csr: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        self.betas = tuple(self.betas)
        unknown = set(self.freeze) - {"VFM", "LLM", "DM"}
        if unknown:
            raise ValueError(f"unknown freeze keys {sorted(unknown)}")
        unknown = set(self.lr_groups) - {"encoder_decoder", "language_model", "others"}
        if unknown:
            raise ValueError(f"unknown lr group keys {sorted(unknown)}")

    @property
    def uses_nip(self) -> bool:
        return self.stage == "S1"

    @property
    def uses_csr(self) -> bool:
        return self.stage in ("S1", "S2") and self.compute_csr


def full_scale_stage(stage: str) -> StageConfig:
    """Full-scale training recipe for one stage."""
    if stage == "S1":
        return StageConfig("S1")
    return StageConfig(
        stage,
        lr_groups={"language_model": 1e-6, "others": 1e-5},
        freeze={"VFM": True, "LLM": False, "DM": True},
        warmup_steps=500,
        total_steps=10000,
        batch_size=16 if stage == "S2" else 2,
        betas=(0.9, 0.999),
        eps=1e-8,
        input_resolution=448,
    )


def desk_stage(stage: str, **overrides) -> StageConfig:
    """The same recipe shrunk to desk scale (<= 2k steps, batch <= 16)."""
    base = full_scale_stage(stage)
    desk = dict(warmup_steps=100, total_steps=2000, batch_size=min(base.batch_size * 4, 16), input_resolution=32)
    desk.update(overrides)
    return replace(base, **desk)


@dataclass
class LossBreakdown:
    ntp: float
    nip: float
    csr: float
    total: float
    counts: dict
    lr: float = 0.0

    def as_record(self, step: int) -> dict:
        return {"step": step, "ntp": self.ntp, "nip": self.nip, "csr": self.csr, "total": self.total, "lr": self.lr}


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def stage_loss(stage: StageConfig, ntp, nip, csr):
    """Stage objective: S1 ntp + lam*nip + lam*csr, S2 ntp + lam*csr, S3 ntp."""
    for name, v in (("ntp", ntp), ("nip", nip), ("csr", csr)):
        if v is not None and not math.isfinite(_scalar(v)):
            raise NumericError(name, _scalar(v))
    lam = stage.lam
    if stage.stage == "S1":
        return ntp + lam * nip + stage.csr_scale * lam * csr
    if stage.stage == "S2":
        return ntp + stage.csr_scale * lam * csr
    return ntp


def apply_freeze(stage: StageConfig, model: DEEMModel) -> set:
    """Set requires_grad per group; returns the trainable group names."""
    groups = model.parameter_groups()
    tagged = {id(p) for m in groups.values() for p in m.parameters()}
    for name, p in model.named_parameters():
        if id(p) not in tagged:
            raise ValueError(f"parameter {name} belongs to no tagged group")
    trainable = set()
    for name, module in groups.items():
        on = name == "connectors" or not stage.freeze.get(name, True)
        for p in module.parameters():
            p.requires_grad_(on)
        if on:
            trainable.add(name)
    return trainable


def build_optimizer(stage: StageConfig, model: DEEMModel) -> torch.optim.Optimizer:
    trainable = apply_freeze(stage, model)
    param_groups = []
    for name in GROUPS:
        if name not in trainable:
            continue
        lr_key = LR_GROUP_OF[name]
        if lr_key not in stage.lr_groups:
            raise ValueError(f"stage {stage.stage} trains {name} but has no {lr_key!r} learning rate")
        params = [p for p in model.parameter_groups()[name].parameters()]
        param_groups.append({"params": params, "lr": stage.lr_groups[lr_key], "peak_lr": stage.lr_groups[lr_key], "name": name})
    return torch.optim.AdamW(param_groups, betas=stage.betas, eps=stage.eps, weight_decay=stage.weight_decay)


def lr_multiplier(step: int, warmup: int, total: int) -> float:
    """Linear warmup to 1 over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if step < warmup:
        return step / max(1, warmup)
    if total <= warmup:
        return 1.0
    frac = min(1.0, (step - warmup) / (total - warmup))
    return 0.5 * (1.0 + math.cos(math.pi * frac))


def set_lr(optimizer, step: int, stage: StageConfig) -> float:
    m = lr_multiplier(step, stage.warmup_steps, stage.total_steps)
    for g in optimizer.param_groups:
        g["lr"] = g["peak_lr"] * m
    return m


def compute_losses(model: DEEMModel, batch: Batch, stage: StageConfig, streams: RngStreams) -> tuple:
    """Forward pass; returns (ntp, nip, csr) tensors and element counts."""
    images = batch.images
    dtype = next(model.parameters()).dtype
    zero = torch.zeros((), dtype=dtype)
    vis = None
    if images:
        px, masks = model.images_to_tensor([e.image for _, _, _, e in images])
        vis = model.visual_tokens(px, masks)
    slots = [(b, pos) for b, pos, _, _ in images]
    E = model.decoder.embed_tokens(batch.token_ids, list(vis) if vis is not None else [], slots)
    states = model.decoder.decode(E)
    ntp = ntp_loss(model.decoder.logits(states), batch.token_ids, batch.ntp_mask)
    counts = {"ntp": ntp_count(batch.ntp_mask), "nip": 0, "csr": 0}

    nip = zero
    if stage.uses_nip:
        sel = [i for i, (_, _, _, e) in enumerate(images) if not e.is_first_in_sequence]
        if sel:
            ctx_len = max(images[i][2] + 1 for i in sel)
            ctx = torch.stack([states[images[i][0], :ctx_len] for i in sel])
            key_mask = torch.arange(ctx_len)[None, :] <= torch.tensor([images[i][2] for i in sel])[:, None]
            cond_tokens = model.connectors.resample(ctx, "llm_side", key_mask)
            drop = torch.tensor([images[i][3].condition_dropped for i in sel])
            cond = DiffusionCondition(cond_tokens, "llm_context")
            nip = nip_loss(model.denoiser, model.schedule, px[sel], cond, streams.torch("nip"), drop)
            counts["nip"] = len(sel)

    csr = zero
    if stage.uses_csr and images:
        cond = DiffusionCondition(vis, "encoder_tokens", image_ids=list(range(len(images))))
        csr = csr_loss(model.denoiser, model.schedule, px, cond, streams.torch("csr"), image_ids=list(range(len(images))))
        counts["csr"] = len(images)
    return ntp, nip, csr, counts


def train_step(
    model: DEEMModel,
    batch: Batch,
    stage: StageConfig,
    optimizer: torch.optim.Optimizer,
    streams: RngStreams,
    step: int = 0,
) -> LossBreakdown:
    model.train()
    lr_mult = set_lr(optimizer, step, stage)
    ntp, nip, csr, counts = compute_losses(model, batch, stage, streams)
    total = stage_loss(stage, ntp, nip, csr)
    if not torch.isfinite(total):
        raise NumericError("total", _scalar(total))
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    params = [p for g in optimizer.param_groups for p in g["params"]]
    if stage.grad_clip:
        torch.nn.utils.clip_grad_norm_(params, stage.grad_clip)
    optimizer.step()
    lr = optimizer.param_groups[0]["peak_lr"] * lr_mult if optimizer.param_groups else 0.0
    return LossBreakdown(_scalar(ntp), _scalar(nip), _scalar(csr), _scalar(total), counts, lr)


def fragment_stream(docs: Sequence, tokenizer, num_visual_tokens: int, rng: np.random.Generator):
    """Assembled documents in an endless sequence of shuffled epochs."""
    while True:
        for i in rng.permutation(len(docs)):
            yield assemble(docs[i], tokenizer, tokenizer.special, num_visual_tokens)


def packed_stream(fragments: Iterator, max_len: int):
    """Streaming form of :func:`pack`: greedy, in order, never splitting a fragment."""
    cur, cur_len = [], 0
    for frag in fragments:
        if len(frag) > max_len:
            raise ValueError(f"fragment of length {len(frag)} exceeds max_len {max_len}")
        if cur and cur_len + len(frag) > max_len:
            yield pack(cur, max_len)[0]
            cur, cur_len = [], 0
        cur.append(frag)
        cur_len += len(frag)
    if cur:
        yield pack(cur, max_len)[0]


def packed_batches(
    docs: Sequence,
    tokenizer,
    num_visual_tokens: int,
    stage: StageConfig,
    rng: np.random.Generator,
) -> Iterator[Batch]:
    """Endless stream of collated batches with condition dropout marked."""
    seqs = packed_stream(fragment_stream(docs, tokenizer, num_visual_tokens, rng), stage.max_len)
    while True:
        batch = [mark_condition_dropout(next(seqs), stage.p_drop, rng) for _ in range(stage.batch_size)]
        yield collate(batch, tokenizer.special.pad_id)


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, model: DEEMModel, stage: StageConfig, optimizer=None, step: int = 0, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "groups": model.state_groups(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "stage": asdict(stage),
            "step": step,
            "model_config": asdict(model.config),
            "tokenizer": model.tokenizer.to_dict(),
            "config_hash": config_hash(model.config, stage),
            "extra": extra or {},
        },
        path,
    )
    return path


def load_checkpoint(path, model: Optional[DEEMModel] = None) -> tuple:
    """Returns (model, payload); builds the model from the stored config if not given."""
    from .sequence import Tokenizer

    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if model is None:
        model = DEEMModel(ModelConfig(**payload["model_config"]), Tokenizer.from_dict(payload["tokenizer"]))
    model.load_state_groups(payload["groups"])
    return model, payload


def run_stage(
    model: DEEMModel,
    docs: Sequence,
    stage: StageConfig,
    out_dir=None,
    seed: int = 0,
    checkpoint_every: int = 0,
    max_bad_steps: int = 3,
    on_step=None,
) -> tuple:
    """Train for ``stage.total_steps``; returns (checkpoint path or None, metrics records).

    Metrics go to ``metrics.jsonl`` in ``out_dir`` when given. A step with a
    non-finite loss is skipped; ``max_bad_steps`` in a row aborts.
    """
    streams = RngStreams(seed)
    optimizer = build_optimizer(stage, model)
    batches = packed_batches(docs, model.tokenizer, model.num_visual_tokens, stage, streams.numpy("data"))
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "w")
    records, bad = [], 0
    try:
        for step in range(stage.total_steps):
            batch = next(batches)
            try:
                bd = train_step(model, batch, stage, optimizer, streams, step)
            except NumericError as exc:
                bad += 1
                log.warning("step %d skipped: %s", step, exc)
                if bad >= max_bad_steps:
                    raise
                continue
            bad = 0
            rec = bd.as_record(step)
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(step, bd)
            if out_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
                save_checkpoint(out_dir / f"step{step + 1:06d}.pt", model, stage, optimizer, step + 1)
    finally:
        if log_fh:
            log_fh.close()
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(out_dir / f"{stage.stage}.pt", model, stage, optimizer, stage.total_steps)
    return ckpt, records
