"""Adaptive equi-join over hash partitions with rewards deferred to consumption.

Each partition picks hash join or sort-merge join and returns a lazy result
iterator. The tuner only learns how long a partition took once a downstream
consumer has drained that iterator, so slow consumers are charged to the join
that fed them.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..tuner import DeferredCompletion, Tuner

__all__ = [
    "JoinTables",
    "hash_join",
    "sort_merge_join",
    "nested_loop_join",
    "JOIN_VARIANTS",
    "partition",
    "ObservedIterator",
    "adaptive_join",
    "skewed_tables",
    "random_tables",
    "consume_all",
    "time_variant",
]

DEFAULT_PARTITIONS = 512


@dataclass
class JoinTables:
    left: list
    right: list
    partitions: int = DEFAULT_PARTITIONS

    def __post_init__(self):
        if self.partitions < 1:
            raise ValueError("partitions must be >= 1")


def hash_join(left, right) -> Iterator[tuple]:
    """Builds on the smaller side; yields ``(key, left_payload, right_payload)``."""
    build_left = len(left) <= len(right)
    build, probe = (left, right) if build_left else (right, left)
    table = defaultdict(list)
    for key, payload in build:
        table[key].append(payload)
    for key, payload in probe:
        matches = table.get(key)
        if not matches:
            continue
        for other in matches:
            yield (key, other, payload) if build_left else (key, payload, other)


def sort_merge_join(left, right) -> Iterator[tuple]:
    a = sorted(left, key=lambda row: row[0])
    b = sorted(right, key=lambda row: row[0])
    i = j = 0
    while i < len(a) and j < len(b):
        ka, kb = a[i][0], b[j][0]
        if ka < kb:
            i += 1
        elif kb < ka:
            j += 1
        else:
            i_end = i
            while i_end < len(a) and a[i_end][0] == ka:
                i_end += 1
            j_end = j
            while j_end < len(b) and b[j_end][0] == ka:
                j_end += 1
            for _, lp in a[i:i_end]:
                for _, rp in b[j:j_end]:
                    yield (ka, lp, rp)
            i, j = i_end, j_end


def nested_loop_join(left, right) -> list:
    """Reference oracle."""
    return [(lk, lp, rp) for lk, lp in left for rk, rp in right if lk == rk]


JOIN_VARIANTS = (hash_join, sort_merge_join)


def partition(rows, partitions: int) -> list[list]:
    parts = [[] for _ in range(partitions)]
    for row in rows:
        parts[hash(row[0]) % partitions].append(row)
    return parts


class ObservedIterator:
    """Wraps a result iterator and completes a deferred round when it is exhausted."""

    def __init__(self, inner, completion: DeferredCompletion):
        self._inner = iter(inner)
        self.completion = completion

    def __iter__(self):
        return self

    def __next__(self):
        try:
            return next(self._inner)
        except StopIteration:
            if not self.completion.done:
                self.completion.complete()
            raise

    @property
    def arm(self) -> int:
        return self.completion.token.arm


def adaptive_join(tables: JoinTables, tuner: Tuner) -> Iterator[ObservedIterator]:
    """Yields one lazily evaluated result iterator per partition, in partition order.

    The variant for a partition is chosen when the consumer asks for that
    partition, so rewards from drained partitions inform later choices.
    """
    if tuner.arms != len(JOIN_VARIANTS):
        raise ValueError("join tuner must have exactly the hash and sort-merge choices")
    lparts = partition(tables.left, tables.partitions)
    rparts = partition(tables.right, tables.partitions)
    for lp, rp in zip(lparts, rparts):
        variant, token = tuner.choose()
        yield ObservedIterator(variant(lp, rp), tuner.defer(token))


def skewed_tables(rng: np.random.Generator, small: int = 2_000, large: int = 400_000, keys: int = 200_000,
                  partitions: int = DEFAULT_PARTITIONS) -> JoinTables:
    """A small dimension table against a large fact table: the hash join's home turf."""
    lk = rng.integers(0, keys, small)
    rk = rng.integers(0, keys, large)
    left = [(int(k), i) for i, k in enumerate(lk)]
    right = [(int(k), i) for i, k in enumerate(rk)]
    return JoinTables(left, right, partitions)


def random_tables(rng: np.random.Generator, rows: int = 2000, keys: int = 500, partitions: int = 16) -> JoinTables:
    lk = rng.integers(0, keys, rows)
    rk = rng.integers(0, keys, rows)
    return JoinTables([(int(k), i) for i, k in enumerate(lk)], [(int(k), i) for i, k in enumerate(rk)], partitions)


def consume_all(iterators) -> list:
    out = []
    for it in iterators:
        out.extend(it)
    return out


def time_variant(tables: JoinTables, variant) -> float:
    start = time.perf_counter()
    for lp, rp in zip(partition(tables.left, tables.partitions), partition(tables.right, tables.partitions)):
        for _ in variant(lp, rp):
            pass
    return time.perf_counter() - start
