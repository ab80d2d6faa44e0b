"""
Seeded random streams.

Every stream is numpy's PCG64 generator fed by a SeedSequence. PCG64 has a
documented state transition (128-bit LCG, XSL-RR output) and numpy guarantees
stream stability across platforms, so a seed reproduces parameters and data
bit for bit. Named child streams derive their spawn key from CRC-32 of the
name, which keeps them independent of construction order.
"""
import zlib
from typing import Tuple

import numpy as np

ALGORITHM = "PCG64"


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """Seeded PCG64 stream with deterministic named children"""

    def __init__(self, seed: int, spawn_key: Tuple[int, ...] = ()):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(spawn_key)
        self.algorithm = ALGORITHM
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, name: str) -> "Rng":
        """Independent stream identified by name; same name, same stream."""
        return Rng(self.seed, self.spawn_key + (_name_key(name),))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def normal(self, std: float, shape) -> np.ndarray:
        return self.generator.normal(0.0, std, size=shape)

    def truncated_normal(self, std: float, shape, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) redrawn until every value lies within bound * std."""
        values = self.generator.normal(0.0, std, size=shape)
        limit = bound * std
        outside = np.abs(values) > limit
        while outside.any():
            values[outside] = self.generator.normal(0.0, std, size=int(outside.sum()))
            outside = np.abs(values) > limit
        return values

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def random(self, shape=None) -> np.ndarray:
        return self.generator.random(size=shape)

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state
