"""Platform-stable random variates.

All streams run on PCG64 and all continuous variates go through inverse
CDFs applied to uniforms built from raw 53-bit integers, so sequences are
identical across platforms and numpy builds.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri, stdtrit

_TWO53 = float(1 << 53)


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    """Uniforms on the open interval (0, 1); never exactly 0 or 1."""
    return rng.integers(1, 1 << 53, size=size).astype(np.float64) / _TWO53


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    return ndtri(open_uniform(rng, size))


def student_t(rng: np.random.Generator, df: float, size) -> np.ndarray:
    return stdtrit(df, open_uniform(rng, size))


def rademacher(rng: np.random.Generator, size) -> np.ndarray:
    return rng.integers(0, 2, size=size).astype(np.float64) * 2.0 - 1.0
