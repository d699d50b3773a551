"""Reproducible random increments.

Every draw is addressed by ``(seed, stream, step, slot)``: the generator for a
draw is built from that tuple alone, so a batch produces the same variates no
matter how the surrounding loop is organised. Rows of a drawn array belong to
individual trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAUSSIAN = "gaussian"
RADEMACHER = "rademacher"
INCREMENTS = (GAUSSIAN, RADEMACHER)


@dataclass(frozen=True)
class NoiseSource:
    seed: int
    stream: int = 0
    increments: str = GAUSSIAN

    def __post_init__(self):
        if self.increments not in INCREMENTS:
            raise ValueError(f"increments must be one of {INCREMENTS}, got {self.increments!r}")

    def rng(self, step: int, slot: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream, step, slot])

    def xi(self, step: int, shape, slot: int = 0) -> np.ndarray:
        """Standardised increment (mean 0, variance 1) of the configured kind."""
        g = self.rng(step, slot)
        if self.increments == RADEMACHER:
            return g.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0
        return g.standard_normal(shape)

    def gaussian(self, step: int, shape, slot: int = 0) -> np.ndarray:
        return self.rng(step, slot).standard_normal(shape)

    def uniform(self, step: int, shape, slot: int = 0) -> np.ndarray:
        return self.rng(step, slot).random(shape)

    def child(self, stream: int) -> "NoiseSource":
        return NoiseSource(self.seed, stream, self.increments)
