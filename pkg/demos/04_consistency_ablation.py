# Two stage-I arms per seed, consistency loss on vs weight 0, scored on
# held-out attribute combinations with mined yes/no pairs.
#
#   python3 demos/04_consistency_ablation.py [base.pt] [seeds, e.g. 0,1]

# %%
import json
import sys

import torch

from deem.ablation import AblationConfig, run_ablation
from deem.base import load_or_build_base

torch.set_num_threads(1)
base_path = sys.argv[1] if len(sys.argv) > 1 else "base0.pt"
seeds = tuple(int(s) for s in sys.argv[2].split(",")) if len(sys.argv) > 2 else (0,)
load_or_build_base(base_path)

# %%
result = run_ablation(base_path, AblationConfig(seeds=seeds))
print(json.dumps({"wins": result["wins"], "runs": [{k: r[k] for k in ("seed", "csr_on", "csr_off")} for r in result["runs"]]}, indent=2))
