"""Pixel-space DDPM pieces: schedule, noising, conditional denoiser, losses, samplers.

Pixels in [0, 1] are mapped to [-1, 1] before noising and back after
sampling; :func:`add_noise` itself is the raw forward formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .layers import MultiHeadAttention, sinusoidal_embedding

SOURCES = ("llm_context", "encoder_tokens", "null")


class NoiseSchedule:
    """Linear beta schedule.

    By default the 1e-4 .. 2e-2 range (defined for 1000 steps) is rescaled
    by ``1000 / T`` so a short chain still ends close to pure noise; pass
    ``rescale=False`` to use the range verbatim.
    """

    def __init__(self, T: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2, rescale: bool = True):
        if T < 1:
            raise ValueError("T must be positive")
        scale = 1000.0 / T if rescale else 1.0
        betas = torch.linspace(beta_start * scale, min(beta_end * scale, 0.999), T, dtype=torch.float64)
        self._set(betas)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        obj = cls.__new__(cls)
        obj._set(torch.as_tensor(betas, dtype=torch.float64))
        return obj

    def _set(self, betas: Tensor):
        if not torch.all((betas > 0) & (betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        self.T = len(betas)
        self.beta = betas
        self.alpha = 1.0 - betas
        self.alpha_bar = torch.cumprod(self.alpha, 0)

    def start_step(self, noise_frac: float) -> int:
        if not (0.0 < noise_frac <= 1.0):
            raise ValueError(f"noise_frac must be in (0, 1], got {noise_frac}")
        return int(math.floor(noise_frac * (self.T - 1)))


def add_noise(x0: Tensor, t, eps: Tensor, alpha_bar: Tensor) -> Tensor:
    """x_t = sqrt(ab[t]) x0 + sqrt(1 - ab[t]) eps; ``t`` scalar or one per batch row."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    T = len(alpha_bar)
    if torch.any(t < 0) or torch.any(t >= T):
        raise ValueError(f"timestep out of range [0, {T})")
    ab = alpha_bar.to(x0.dtype)[t]
    if ab.ndim:
        ab = ab.view(-1, *([1] * (x0.ndim - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


@dataclass
class DiffusionCondition:
    tokens: Optional[Tensor]  # (B x) M x C, None for the null condition
    source: str
    key_mask: Optional[Tensor] = None
    image_ids: Optional[list] = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown condition source {self.source!r}")
        if (self.tokens is None) != (self.source == "null"):
            raise ValueError("tokens must be given exactly when source is not null")

    @classmethod
    def null(cls) -> "DiffusionCondition":
        return cls(None, "null")


def to_model_space(pixels: Tensor) -> Tensor:
    return pixels * 2.0 - 1.0


def to_pixels(x: Tensor) -> Tensor:
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.n1 = nn.GroupNorm(8, cin)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * cout)
        self.n2 = nn.GroupNorm(8, cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.c1(F.silu(self.n1(x)))
        scale, shift = self.emb(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.n2(h) * (1 + scale) + shift
        h = self.c2(F.silu(h))
        return h + self.skip(x)


class CrossAttention2d(nn.Module):
    def __init__(self, ch: int, cond_dim: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, ch)
        self.attn = MultiHeadAttention(ch, heads, kv_dim=cond_dim)

    def forward(self, x: Tensor, cond: Tensor, key_mask: Optional[Tensor]) -> Tensor:
        b, c, h, w = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)
        y = self.attn(q, cond, key_mask=key_mask)
        return x + y.transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """Two-level conv U-Net with cross-attention to condition tokens.

    Condition tokens also enter through their masked mean, added to the
    timestep embedding.
    """

    def __init__(self, cond_dim: int = 128, width: int = 32, heads: int = 4, T: int = 100):
        super().__init__()
        self.cond_dim = cond_dim
        emb = width * 4
        self.width = width
        self.t_mlp = nn.Sequential(nn.Linear(width, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.c_mlp = nn.Sequential(nn.LayerNorm(cond_dim), nn.Linear(cond_dim, emb))
        self.null_token = nn.Parameter(torch.randn(cond_dim) * 0.02)
        w1, w2 = width, 2 * width
        self.inc = nn.Conv2d(3, w1, 3, padding=1)
        self.d1 = ResBlock(w1, w1, emb)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.d2 = ResBlock(w2, w2, emb)
        self.down2 = nn.Conv2d(w2, w2, 3, stride=2, padding=1)
        self.mid1 = ResBlock(w2, w2, emb)
        self.mid_attn = CrossAttention2d(w2, cond_dim, heads)
        self.mid2 = ResBlock(w2, w2, emb)
        self.up2 = nn.ConvTranspose2d(w2, w2, 4, stride=2, padding=1)
        self.u2 = ResBlock(2 * w2, w2, emb)
        self.u2_attn = CrossAttention2d(w2, cond_dim, heads)
        self.up1 = nn.ConvTranspose2d(w2, w1, 4, stride=2, padding=1)
        self.u1 = ResBlock(2 * w1, w1, emb)
        self.out = nn.Sequential(nn.GroupNorm(8, w1), nn.SiLU(), nn.Conv2d(w1, 3, 3, padding=1))

    def condition_tokens(self, cond: DiffusionCondition, batch: int, drop: Optional[Tensor] = None):
        """Resolve a condition to B x M x C tokens (+ key mask), applying per-row null dropout."""
        null = self.null_token.view(1, 1, -1)
        if cond.source == "null":
            return null.expand(batch, 1, -1), None
        tok = cond.tokens
        if tok.ndim == 2:
            tok = tok[None].expand(batch, -1, -1)
        mask = cond.key_mask
        if drop is not None and bool(drop.any()):
            tok = torch.where(drop.view(-1, 1, 1), null.to(tok.dtype).expand_as(tok), tok)
            if mask is not None:
                mask = mask | drop.view(-1, 1)
        return tok, mask

    def forward(self, x_t: Tensor, t: Tensor, cond_tokens: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        """x_t: B x H x W x 3 in model space; returns predicted noise, same shape."""
        x = x_t.permute(0, 3, 1, 2)
        t = torch.as_tensor(t, device=x.device).reshape(-1).expand(x.shape[0])
        e = self.t_mlp(sinusoidal_embedding(t.to(x.dtype), self.width))
        if key_mask is None:
            pooled = cond_tokens.mean(1)
        else:
            w = key_mask.to(cond_tokens.dtype)[..., None]
            pooled = (cond_tokens * w).sum(1) / w.sum(1).clamp_min(1.0)
        e = e + self.c_mlp(pooled)
        h1 = self.d1(self.inc(x), e)
        h2 = self.d2(self.down1(h1), e)
        h = self.mid1(self.down2(h2), e)
        h = self.mid_attn(h, cond_tokens, key_mask)
        h = self.mid2(h, e)
        h = self.u2(torch.cat([self.up2(h), h2], 1), e)
        h = self.u2_attn(h, cond_tokens, key_mask)
        h = self.u1(torch.cat([self.up1(h), h1], 1), e)
        return self.out(h).permute(0, 2, 3, 1)


def predict_noise(
    dm: Denoiser, x_t: Tensor, t, cond: DiffusionCondition, drop: Optional[Tensor] = None
) -> Tensor:
    squeeze = x_t.ndim == 3
    if squeeze:
        x_t = x_t[None]
    if x_t.shape[-1] != 3:
        raise ValueError(f"x_t must be (B x) H x W x 3, got {tuple(x_t.shape)}")
    tok, mask = dm.condition_tokens(cond, x_t.shape[0], drop)
    if tok.shape[-1] != dm.cond_dim:
        raise ValueError(f"condition width {tok.shape[-1]} != denoiser cond_dim {dm.cond_dim}")
    out = dm(x_t, torch.as_tensor(t), tok, mask)
    return out[0] if squeeze else out


def denoising_loss(
    dm: Denoiser,
    schedule: NoiseSchedule,
    pixels: Tensor,
    cond: DiffusionCondition,
    generator: torch.Generator,
    drop: Optional[Tensor] = None,
    reduction: str = "mean",
) -> Tensor:
    """E_{t,eps} ||eps - D(x_t, t, cond)||^2 with one (t, eps) draw per image.

    Returns the mean over all elements, or per-image means for
    ``reduction="none"``.
    """
    if pixels.ndim == 3:
        pixels = pixels[None]
    b = pixels.shape[0]
    x0 = to_model_space(pixels)
    t = torch.randint(0, schedule.T, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = add_noise(x0, t, eps, schedule.alpha_bar)
    err = (eps - predict_noise(dm, x_t, t, cond, drop)) ** 2
    per_image = err.flatten(1).mean(1)
    return per_image if reduction == "none" else per_image.mean()


def nip_loss(dm, schedule, pixels, cond: DiffusionCondition, generator, drop=None, reduction="mean"):
    """Next-image prediction: denoise conditioned on decoder context (or null)."""
    if cond.source not in ("llm_context", "null"):
        raise ValueError(f"next-image loss needs an llm_context condition, got {cond.source}")
    return denoising_loss(dm, schedule, pixels, cond, generator, drop, reduction)


def csr_loss(dm, schedule, pixels, cond: DiffusionCondition, generator, image_ids=None, reduction="mean"):
    """Consistency regularisation: denoise conditioned on the image's own encoder tokens."""
    if cond.source != "encoder_tokens":
        raise ValueError(f"consistency loss needs an encoder_tokens condition, got {cond.source}")
    if image_ids is not None and cond.image_ids is not None and list(image_ids) != list(cond.image_ids):
        raise ValueError("consistency condition was built from a different image")
    return denoising_loss(dm, schedule, pixels, cond, generator, None, reduction)


def guided_eps(eps_cond: Tensor, eps_null: Optional[Tensor], scale: float) -> Tensor:
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_null
    return eps_null + scale * (eps_cond - eps_null)


def _step_table(schedule: NoiseSchedule, timesteps: list) -> list:
    """(t, alpha_bar_t, alpha_bar_prev) for a descending, possibly strided, chain."""
    ab = schedule.alpha_bar
    out = []
    for i, t in enumerate(timesteps):
        prev = ab[timesteps[i + 1]] if i + 1 < len(timesteps) else torch.tensor(1.0, dtype=ab.dtype)
        out.append((t, ab[t], prev))
    return out


@torch.no_grad()
def _denoise(dm, x, timesteps, schedule, cond, guidance_scale, generator, observer=None):
    b = x.shape[0]
    for t, ab_t, ab_prev in _step_table(schedule, timesteps):
        tt = torch.full((b,), t, dtype=torch.long)
        eps_c = predict_noise(dm, x, tt, cond) if guidance_scale != 0.0 else None
        eps_n = None
        if guidance_scale != 1.0:
            eps_n = predict_noise(dm, x, tt, DiffusionCondition.null())
        eps = guided_eps(eps_c, eps_n, guidance_scale)
        if observer is not None:
            observer(t, eps_c, eps_n, eps)
        ab_t = ab_t.to(x.dtype)
        ab_prev = ab_prev.to(x.dtype)
        x0_pred = ((x - (1 - ab_t).sqrt() * eps) / ab_t.sqrt()).clamp(-1.0, 1.0)
        if float(ab_prev) >= 1.0:
            x = x0_pred
            continue
        beta = 1 - ab_t / ab_prev
        mean = (ab_prev.sqrt() * beta / (1 - ab_t)) * x0_pred + ((1 - beta).sqrt() * (1 - ab_prev) / (1 - ab_t)) * x
        var = beta * (1 - ab_prev) / (1 - ab_t)
        x = mean + var.sqrt() * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x


def sample(
    dm: Denoiser,
    schedule: NoiseSchedule,
    cond: DiffusionCondition,
    shape: tuple,
    steps: Optional[int] = None,
    guidance_scale: float = 3.0,
    generator: Optional[torch.Generator] = None,
    observer=None,
) -> Tensor:
    """Ancestral sampling from pure noise with classifier-free guidance.

    ``shape`` is B x H x W x 3; returns pixels in [0, 1].
    """
    steps = schedule.T if steps is None else steps
    if not 1 <= steps <= schedule.T:
        raise ValueError(f"steps must be in [1, {schedule.T}]")
    generator = generator or torch.Generator().manual_seed(0)
    dtype = next(dm.parameters()).dtype
    timesteps = sorted({int(round(v)) for v in torch.linspace(0, schedule.T - 1, steps).tolist()}, reverse=True)
    x = torch.randn(shape, generator=generator, dtype=dtype)
    return to_pixels(_denoise(dm, x, timesteps, schedule, cond, guidance_scale, generator, observer))


def reconstruct_partial(
    dm: Denoiser,
    schedule: NoiseSchedule,
    pixels: Tensor,
    cond: DiffusionCondition,
    noise_frac: float = 0.65,
    generator: Optional[torch.Generator] = None,
    guidance_scale: float = 3.0,
) -> Tensor:
    """Noise ``pixels`` to step floor(noise_frac * (T - 1)) and denoise back to 0."""
    t_star = schedule.start_step(noise_frac)
    generator = generator or torch.Generator().manual_seed(0)
    squeeze = pixels.ndim == 3
    if squeeze:
        pixels = pixels[None]
    x0 = to_model_space(pixels.to(next(dm.parameters()).dtype))
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x = add_noise(x0, t_star, eps, schedule.alpha_bar)
    out = to_pixels(_denoise(dm, x, list(range(t_star, -1, -1)), schedule, cond, guidance_scale, generator))
    return out[0] if squeeze else out
