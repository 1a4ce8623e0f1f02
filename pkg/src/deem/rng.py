"""Named random streams derived from a single seed.

Each consumer asks for its own stream by name, so switching one loss term
off never shifts the draws seen by another.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


class RngStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._np = {}
        self._torch = {}

    def numpy(self, name: str) -> np.random.Generator:
        if name not in self._np:
            self._np[name] = np.random.default_rng(np.random.SeedSequence([self.seed, _key(name)]))
        return self._np[name]

    def torch(self, name: str) -> torch.Generator:
        if name not in self._torch:
            ss = np.random.SeedSequence([self.seed, _key(name)])
            self._torch[name] = torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0] >> 1))
        return self._torch[name]

    def state_dict(self) -> dict:
        return {
            "seed": self.seed,
            "numpy": {k: g.bit_generator.state for k, g in self._np.items()},
            "torch": {k: g.get_state() for k, g in self._torch.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.seed = state["seed"]
        for k, s in state["numpy"].items():
            self.numpy(k).bit_generator.state = s
        for k, s in state["torch"].items():
            self.torch(k).set_state(s)


def seeded_torch_init(seed: int) -> None:
    """Seed the global torch RNG used by module constructors."""
    torch.manual_seed(seed)
