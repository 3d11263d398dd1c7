"""Sparsifying compressors, their residuals and wire-size accounting.

Every compressor returns a dense vector that is zero outside the kept
support, plus a description of that support.  RandomK and GRBS draw their
support from ``(seed, round)`` only, so all workers agree on it.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .numerics import DimensionError, check_same_length, partition
from .streams import Stream, generator

VALUE_BITS = 32
DEFAULT_MAX_BLOCKS = 512


class ProtocolError(RuntimeError):
    """Round numbering or cross-worker agreement was violated."""


class Kind(str, enum.Enum):
    IDENTITY = "identity"
    ZERO = "zero"
    RANDOMK = "randomk"
    TOPK = "topk"
    GRBS = "grbs"

    @classmethod
    def parse(cls, text: str) -> "Kind":
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(f"unknown compressor kind {text!r}") from None


@dataclass(frozen=True)
class CompressorSpec:
    kind: Kind = Kind.IDENTITY
    ratio: float = 1.0
    blocks: int | None = None  # GRBS only; None means min(d, 512)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind in (Kind.RANDOMK, Kind.TOPK, Kind.GRBS) and not self.ratio >= 1:
            raise ValueError(f"compression ratio must be >= 1, got {self.ratio}")
        if self.blocks is not None and self.blocks < 1:
            raise ValueError("blocks must be positive")

    @property
    def is_randomized(self) -> bool:
        return self.kind in (Kind.RANDOMK, Kind.GRBS)

    def k(self, d: int) -> int:
        return max(1, math.floor(d / self.ratio))

    def num_blocks(self, d: int) -> int:
        return self.blocks if self.blocks is not None else min(d, DEFAULT_MAX_BLOCKS)

    def kept_blocks(self, d: int) -> int:
        return max(1, math.floor(self.num_blocks(d) / self.ratio))

    def delta(self, d: int) -> float:
        """Nominal approximation factor (GRBS and RandomK: in expectation)."""
        if self.kind is Kind.IDENTITY:
            return 1.0
        if self.kind is Kind.ZERO:
            return 0.0
        if self.kind is Kind.GRBS:
            return 1.0 / self.ratio
        return self.k(d) / d

    def with_seed(self, seed: int) -> "CompressorSpec":
        return replace(self, seed=seed)


IDENTITY = CompressorSpec(Kind.IDENTITY)
ZERO = CompressorSpec(Kind.ZERO)


def topk(ratio: float) -> CompressorSpec:
    return CompressorSpec(Kind.TOPK, ratio)


def randomk(ratio: float, seed: int = 0) -> CompressorSpec:
    return CompressorSpec(Kind.RANDOMK, ratio, seed=seed)


def grbs(ratio: float, blocks: int | None = None, seed: int = 0) -> CompressorSpec:
    return CompressorSpec(Kind.GRBS, ratio, blocks, seed)


class Support(str, enum.Enum):
    FULL = "full"
    INDICES = "indices"
    BLOCKS = "blocks"


@dataclass(frozen=True, eq=False)
class CompressedMessage:
    dense: np.ndarray
    support: Support
    # sorted coordinate indices (INDICES) or sorted block ids (BLOCKS); empty for FULL
    selection: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    num_blocks: int = 0
    payload_bits: int = 0
    value_bits: int = 0

    @property
    def d(self) -> int:
        return len(self.dense)

    @property
    def index_bits(self) -> int:
        return self.payload_bits - self.value_bits

    def mask(self) -> np.ndarray:
        """Boolean mask of the kept coordinates."""
        if self.support is Support.FULL:
            return np.ones(self.d, dtype=bool)
        if self.support is Support.INDICES:
            m = np.zeros(self.d, dtype=bool)
            m[self.selection] = True
            return m
        chosen = np.zeros(self.num_blocks, dtype=bool)
        chosen[self.selection] = True
        return chosen[partition(self.d, self.num_blocks).block_of]

    def same_support(self, other: "CompressedMessage") -> bool:
        return (
            self.support is other.support
            and self.num_blocks == other.num_blocks
            and np.array_equal(self.selection, other.selection)
        )


def _bits_for(count: int) -> int:
    return math.ceil(math.log2(count)) if count > 1 else 0


def size_bits(d: int, support: Support, selection: np.ndarray, num_blocks: int = 0) -> tuple[int, int]:
    """Return ``(value_bits, index_bits)`` for a message of the given shape."""
    if support is Support.FULL:
        return VALUE_BITS * d, 0
    m = len(selection)
    if support is Support.INDICES:
        return VALUE_BITS * m, m * _bits_for(d)
    sizes = partition(d, num_blocks).sizes
    kept = int(sizes[selection].sum()) if m else 0
    return VALUE_BITS * kept, m * _bits_for(num_blocks)


def encoded_size_bits(msg: CompressedMessage) -> int:
    value, index = size_bits(msg.d, msg.support, msg.selection, msg.num_blocks)
    return value + index


def make_message(dense: np.ndarray, support: Support, selection=None, num_blocks: int = 0) -> CompressedMessage:
    sel = np.zeros(0, dtype=np.int64) if selection is None else np.asarray(selection, dtype=np.int64)
    value, index = size_bits(len(dense), support, sel, num_blocks)
    return CompressedMessage(dense, support, sel, num_blocks, value + index, value)


@lru_cache(maxsize=128)
def _random_selection(seed: int, round: int, population: int, count: int) -> np.ndarray:
    rng = generator(seed, round, Stream.COMPRESS)
    sel = np.sort(rng.choice(population, size=count, replace=False))
    sel.setflags(write=False)
    return sel


def compress(spec: CompressorSpec, v: np.ndarray, round: int) -> CompressedMessage:
    if round < 1:
        raise ProtocolError(f"rounds are numbered from 1, got {round}")
    d = len(v)
    kind = spec.kind
    if kind is Kind.IDENTITY:
        return make_message(v.copy(), Support.FULL)
    if kind is Kind.ZERO:
        return make_message(np.zeros(d), Support.INDICES)
    if kind is Kind.TOPK:
        k = spec.k(d)
        # stable sort on -|v|: ties go to the lower index
        idx = np.sort(np.argsort(-np.abs(v), kind="stable")[:k])
        dense = np.zeros(d)
        dense[idx] = v[idx]
        return make_message(dense, Support.INDICES, idx)
    if kind is Kind.RANDOMK:
        idx = _random_selection(spec.seed, round, d, spec.k(d))
        dense = np.zeros(d)
        dense[idx] = v[idx]
        return make_message(dense, Support.INDICES, idx)
    B = spec.num_blocks(d)
    chosen = _random_selection(spec.seed, round, B, spec.kept_blocks(d))
    keep = np.zeros(B, dtype=bool)
    keep[chosen] = True
    dense = np.where(keep[partition(d, B).block_of], v, 0.0)
    return make_message(dense, Support.BLOCKS, chosen, B)


def residual(v: np.ndarray, msg: CompressedMessage) -> np.ndarray:
    check_same_length(v, msg.dense)
    return v - msg.dense


def delta_samples(spec: CompressorSpec, trials: int, d: int, rng_seed: int = 0) -> np.ndarray:
    """Per-trial ``||C(v) - v||^2 / ||v||^2`` for standard-normal ``v``.

    Trial ``t`` uses round ``t``, so randomized compressors see a fresh
    support each trial.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    ratios = np.empty(trials)
    for t in range(1, trials + 1):
        v = generator(rng_seed, t, Stream.TRIAL).standard_normal(d)
        r = residual(v, compress(spec, v, t))
        ratios[t - 1] = np.dot(r, r) / np.dot(v, v)
    return ratios


def delta_estimate(spec: CompressorSpec, trials: int, d: int, rng_seed: int = 0) -> float:
    """Monte-Carlo estimate of ``E ||C(v) - v||^2 / ||v||^2``, i.e. ``1 - delta``."""
    return float(delta_samples(spec, trials, d, rng_seed).mean())


__all__ = [
    "CompressedMessage",
    "CompressorSpec",
    "DimensionError",
    "IDENTITY",
    "Kind",
    "ProtocolError",
    "Support",
    "ZERO",
    "compress",
    "delta_estimate",
    "delta_samples",
    "encoded_size_bits",
    "grbs",
    "make_message",
    "randomk",
    "residual",
    "size_bits",
    "topk",
]
