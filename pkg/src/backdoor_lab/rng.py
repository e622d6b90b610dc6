"""Named random streams derived from a single master seed.

Every random draw in a run goes through one of these streams so that
ablating one source of randomness (say, padding positions) leaves the
others untouched.
"""
import hashlib

import numpy as np
import torch

STREAM_NAMES = ("poison", "latent", "padding", "init", "data-order", "projection", "augment")


def derive_seed(master_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(master_seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


class RngStreams:
    """Lazily created, cached generators keyed by stream name."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._torch = {}
        self._numpy = {}

    def torch(self, name: str) -> torch.Generator:
        if name not in self._torch:
            g = torch.Generator()
            g.manual_seed(derive_seed(self.seed, name))
            self._torch[name] = g
        return self._torch[name]

    def numpy(self, name: str) -> np.random.Generator:
        if name not in self._numpy:
            self._numpy[name] = np.random.default_rng(derive_seed(self.seed, name))
        return self._numpy[name]

    def child(self, name: str) -> "RngStreams":
        return RngStreams(derive_seed(self.seed, name))

    def seed_global(self, name: str = "init") -> None:
        """Seed torch's global RNG, which module constructors draw from."""
        torch.manual_seed(derive_seed(self.seed, name))


def as_generator(rng, name: str) -> torch.Generator:
    """Accept an RngStreams, a torch.Generator, or an int seed."""
    if isinstance(rng, torch.Generator):
        return rng
    if isinstance(rng, RngStreams):
        return rng.torch(name)
    if isinstance(rng, (int, np.integer)):
        return RngStreams(int(rng)).torch(name)
    raise TypeError(f"cannot derive a generator from {type(rng).__name__}")
