"""Dense vector helpers and contiguous block partitioning.

Vectors are plain 1-D ``float64`` numpy arrays; nothing here wraps them.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class DimensionError(ValueError):
    """Two vectors that must share a length do not."""


class PartitionError(ValueError):
    pass


def as_vector(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def check_same_length(*vs: np.ndarray) -> int:
    d = len(vs[0])
    for v in vs[1:]:
        if len(v) != d:
            raise DimensionError(f"length mismatch: {d} vs {len(v)}")
    return d


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a * x + y`` as a new vector."""
    check_same_length(x, y)
    return a * x + y


def norm_sq(x: np.ndarray) -> float:
    return float(np.dot(x, x))


def is_finite(x: np.ndarray) -> bool:
    return bool(np.isfinite(x).all())


@dataclass(frozen=True)
class BlockPartition:
    d: int
    B: int
    boundaries: tuple[int, ...]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(np.asarray(self.boundaries))

    def block(self, j: int) -> slice:
        return slice(self.boundaries[j], self.boundaries[j + 1])

    @property
    def block_of(self) -> np.ndarray:
        """Block index of every coordinate (length d)."""
        return _block_of(self.d, self.B)


@lru_cache(maxsize=256)
def partition(d: int, B: int) -> BlockPartition:
    """Split ``range(d)`` into ``B`` contiguous blocks.

    The first ``d % B`` blocks receive one extra coordinate, so sizes
    differ by at most one.
    """
    if B < 1 or B > d:
        raise PartitionError(f"need 1 <= B <= d, got B={B}, d={d}")
    base, extra = divmod(d, B)
    sizes = [base + 1] * extra + [base] * (B - extra)
    bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    return BlockPartition(d, B, tuple(int(b) for b in bounds))


@lru_cache(maxsize=64)
def _block_of(d: int, B: int) -> np.ndarray:
    sizes = partition(d, B).sizes
    out = np.repeat(np.arange(B), sizes)
    out.setflags(write=False)
    return out
