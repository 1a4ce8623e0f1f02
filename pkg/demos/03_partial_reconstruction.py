# Noise an image part of the way and denoise it back, conditioned on its own
# encoder tokens. Needs the cached toy base (built on first use, ~10 min).
#
#   python3 demos/03_partial_reconstruction.py [base.pt]

# %%
import sys

import numpy as np
import torch

from deem.base import load_or_build_base
from deem.datamodel import save_png
from deem.diffusion import DiffusionCondition, reconstruct_partial
from deem.synth import make_samples, split_combos

torch.set_num_threads(1)
model = load_or_build_base(sys.argv[1] if len(sys.argv) > 1 else "base0.pt")
model.eval()

# %%
rng = np.random.default_rng(3)
samples = make_samples(split_combos()[0], 4, model.config.resolution, rng)
px = torch.as_tensor(np.stack([s.image.pixels for s in samples]))
with torch.no_grad():
    cond = DiffusionCondition(model.visual_tokens(px), "encoder_tokens")
    for frac in (0.05, 0.35, 0.65, 1.0):
        rec = reconstruct_partial(model.denoiser, model.schedule, px, cond, frac, torch.Generator().manual_seed(0))
        t_star = model.schedule.start_step(frac)
        print(f"noise {frac:.2f} (t*={t_star:2d}): mean abs error {float((rec - px).abs().mean()):.3f}")
        save_png(np.concatenate(list(rec.numpy()), axis=1), f"reconstruction_{int(frac * 100):03d}.png")
