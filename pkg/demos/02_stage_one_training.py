# A short stage-I run on a tiny model, with the loss breakdown per step.
#
#   python3 demos/02_stage_one_training.py

# %%
import numpy as np
import torch

from deem.base import build_tokenizer, toy_config
from deem.model import DEEMModel
from deem.synth import all_combos, make_samples, train_documents
from deem.training import apply_freeze, desk_stage, run_stage, stage_loss

torch.manual_seed(0)
rng = np.random.default_rng(0)
model = DEEMModel(toy_config(resolution=16, enc_stride=4, dim=32, heads=2, max_len=96), build_tokenizer())
docs = train_documents(make_samples(all_combos(), 200, 16, rng), rng)

# %% stage I trains the image encoder and the connectors; language model and denoiser stay frozen
stage = desk_stage("S1", total_steps=60, warmup_steps=10, batch_size=4, max_len=96)
print("trainable groups:", sorted(apply_freeze(stage, model)))
print("objective at (2.0, 0.3, 0.5):", stage_loss(stage, 2.0, 0.3, 0.5))

# %% the frozen parts are untrained here, so the losses only creep down; demo 03 uses a pretrained base
_, records = run_stage(model, docs, stage, seed=0)
for r in records[::10]:
    print(f"step {r['step']:3d}  ntp {r['ntp']:.3f}  nip {r['nip']:.4f}  csr {r['csr']:.4f}  total {r['total']:.3f}")
