"""Mergeable one-pass reward statistics.

A :class:`RunningStat` is the (count, mean, sum of squared deviations)
triple for one arm. :class:`ArmStats` stacks the same triple for every arm
of a tuner (optionally with extra leading batch axes, which the simulation
engines use to run many independent trials in lockstep).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RunningStat",
    "stat_update",
    "stat_merge",
    "merge_moments",
    "merge_many",
    "ArmStats",
]


@dataclass(frozen=True)
class RunningStat:
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @property
    def variance(self) -> float:
        """Unbiased sample variance; needs at least two observations."""
        if self.n < 2:
            raise ValueError("variance needs n >= 2")
        return self.m2 / (self.n - 1)

    @classmethod
    def of(cls, values) -> "RunningStat":
        s = cls()
        for v in values:
            s = stat_update(s, v)
        return s


def stat_update(s: RunningStat, r: float) -> RunningStat:
    r = float(r)
    if not math.isfinite(r):
        raise ValueError(f"reward must be finite, got {r!r}")
    n = s.n + 1
    delta = r - s.mean
    mean = s.mean + delta / n
    m2 = s.m2 + delta * (r - mean)
    return RunningStat(n, mean, max(m2, 0.0))


def stat_merge(a: RunningStat, b: RunningStat) -> RunningStat:
    if b.n == 0:
        return a
    if a.n == 0:
        return b
    n = a.n + b.n
    delta = b.mean - a.mean
    mean = a.mean + delta * b.n / n
    m2 = a.m2 + b.m2 + delta * delta * (a.n * b.n / n)
    return RunningStat(n, mean, max(m2, 0.0))


def merge_moments(na, ma, sa, nb, mb, sb):
    """Elementwise parallel merge of two stacks of (n, mean, m2).

    Merging with an empty entry returns the other side bit-for-bit.
    """
    n = na + nb
    frac = np.divide(nb, n, out=np.zeros(np.shape(n)), where=n > 0)
    delta = mb - ma
    mean = ma + delta * frac
    m2 = sa + sb + delta * delta * (na * frac)
    return n, mean, np.maximum(m2, 0.0)


def merge_many(n, mean, m2, axis: int):
    """Merge every entry along ``axis`` in one stable two-pass reduction.

    Entries with ``n == 0`` contribute nothing, so callers mask sources by
    zeroing their counts (and m2).
    """
    total = n.sum(axis=axis)
    weighted = (n * mean).sum(axis=axis)
    mu = np.divide(weighted, total, out=np.zeros(np.shape(total)), where=total > 0)
    dev = mean - np.expand_dims(mu, axis)
    spread = (m2 + n * dev * dev).sum(axis=axis)
    return total, mu, np.maximum(spread, 0.0)


_ARM_HEADER = struct.Struct("<I")
_ARM_RECORD = struct.Struct("<Qdd")


@dataclass(frozen=True, eq=False)
class ArmStats:
    """Per-arm running statistics for a context-free tuner.

    Arrays have shape ``batch + (arms,)``. Instances are treated as values:
    every operation returns a new object.
    """

    n: np.ndarray
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, arms: int, batch: tuple = ()) -> "ArmStats":
        if arms < 1:
            raise ValueError("need at least one arm")
        shape = tuple(batch) + (arms,)
        return cls(np.zeros(shape, dtype=np.int64), np.zeros(shape), np.zeros(shape))

    @classmethod
    def from_stats(cls, stats) -> "ArmStats":
        stats = list(stats)
        if not stats:
            raise ValueError("need at least one arm")
        return cls(
            np.array([s.n for s in stats], dtype=np.int64),
            np.array([s.mean for s in stats], dtype=float),
            np.array([s.m2 for s in stats], dtype=float),
        )

    @property
    def arms(self) -> int:
        return self.n.shape[-1]

    @property
    def total(self) -> int:
        return int(self.n.sum())

    def arm(self, i: int) -> RunningStat:
        return RunningStat(int(self.n[i]), float(self.mean[i]), float(self.m2[i]))

    def observe(self, arm: int, reward: float) -> "ArmStats":
        s = stat_update(self.arm(arm), reward)
        n, mean, m2 = self.n.copy(), self.mean.copy(), self.m2.copy()
        n[arm], mean[arm], m2[arm] = s.n, s.mean, s.m2
        return ArmStats(n, mean, m2)

    def merge(self, other: "ArmStats") -> "ArmStats":
        if self.n.shape != other.n.shape:
            raise ValueError(f"shape mismatch {self.n.shape} vs {other.n.shape}")
        return ArmStats(*merge_moments(self.n, self.mean, self.m2, other.n, other.mean, other.m2))

    def masked(self, keep) -> "ArmStats":
        """Copy with every arm outside ``keep`` reset to empty."""
        keep = np.asarray(keep, dtype=bool)
        return ArmStats(
            np.where(keep, self.n, 0),
            np.where(keep, self.mean, 0.0),
            np.where(keep, self.m2, 0.0),
        )

    def empty_like(self) -> "ArmStats":
        return ArmStats.empty(self.arms, self.n.shape[:-1])

    def equals(self, other: "ArmStats") -> bool:
        return (
            np.array_equal(self.n, other.n)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.m2, other.m2)
        )

    def to_bytes(self) -> bytes:
        if self.n.ndim != 1:
            raise ValueError("only unbatched states serialize")
        parts = [_ARM_HEADER.pack(self.arms)]
        for i in range(self.arms):
            parts.append(_ARM_RECORD.pack(int(self.n[i]), float(self.mean[i]), float(self.m2[i])))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ArmStats":
        (arms,) = _ARM_HEADER.unpack_from(payload, 0)
        expected = _ARM_HEADER.size + arms * _ARM_RECORD.size
        if len(payload) != expected:
            raise ValueError(f"expected {expected} bytes for {arms} arms, got {len(payload)}")
        recs = [_ARM_RECORD.unpack_from(payload, _ARM_HEADER.size + i * _ARM_RECORD.size) for i in range(arms)]
        return cls(
            np.array([r[0] for r in recs], dtype=np.int64),
            np.array([r[1] for r in recs], dtype=float),
            np.array([r[2] for r in recs], dtype=float),
        )

    def __repr__(self) -> str:
        return f"ArmStats(n={self.n.tolist()}, mean={self.mean.tolist()}, m2={self.m2.tolist()})"
