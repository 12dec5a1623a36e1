"""Seeded random state, weight initializers and shared dropout masks."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .core import DEFAULT_DTYPE

GAUSSIAN_STD = 0.01


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the same seed yields the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_rng(rng: np.random.Generator) -> np.random.Generator:
    """Independent stream derived from ``rng`` (consumes one draw from it)."""
    return make_rng(int(rng.integers(0, 2**63 - 1)))


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape extents must be positive, got {shape}")
    return shape


def init_zero(shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=dtype)


def init_gaussian(shape, rng: np.random.Generator, std: float = GAUSSIAN_STD,
                  dtype=DEFAULT_DTYPE) -> np.ndarray:
    return (rng.standard_normal(_check_shape(shape)) * std).astype(dtype)


def init_orthogonal(shape, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Random orthogonal matrix; rectangular shapes are truncated from a square one.

    For (r, c) with r >= c the columns are orthonormal, otherwise the rows are.
    """
    shape = _check_shape(shape)
    if len(shape) != 2:
        raise ValueError(f"orthogonal init needs a 2-d shape, got {shape}")
    n = max(shape)
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    # sign fix makes the draw Haar-distributed
    q = q * np.sign(np.diag(r))
    return q[: shape[0], : shape[1]].astype(dtype)


def dropout_mask(shape, p: float, rng: Optional[np.random.Generator], train: bool = True,
                 dtype=DEFAULT_DTYPE) -> Optional[np.ndarray]:
    """Inverted-dropout mask: 0 with probability p, else 1/(1-p).

    Returns None in evaluation mode (or when p == 0), meaning "do not multiply".
    Callers build one mask per sequence and reuse it at every timestep.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return None
    keep = rng.random(_check_shape(shape)) >= p
    return (keep / (1.0 - p)).astype(dtype)
