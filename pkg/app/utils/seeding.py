"""
Seeded generator hierarchy.

Every consumer asks for a named substream so adding a new consumer never
shifts the random numbers another module sees.
"""
import numpy as np
import torch

from .validators import stable_name_hash


class RngHierarchy:
    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed) % (1 << 64)
        self.path = path

    def _entropy(self, name: str):
        full = f"{self.path}/{name}" if self.path else name
        return [self.seed & 0xFFFFFFFF, self.seed >> 32, stable_name_hash(full)]

    def child(self, name: str) -> "RngHierarchy":
        full = f"{self.path}/{name}" if self.path else name
        return RngHierarchy(self.seed, full)

    def numpy(self, name: str) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self._entropy(name)))

    def int_seed(self, name: str) -> int:
        """63-bit integer seed for APIs that take a plain int"""
        state = np.random.SeedSequence(self._entropy(name)).generate_state(2, dtype=np.uint32)
        return (int(state[0]) << 31) ^ int(state[1])

    def torch(self, name: str) -> torch.Generator:
        generator = torch.Generator()
        generator.manual_seed(self.int_seed(name))
        return generator
