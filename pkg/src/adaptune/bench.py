"""Micro-benchmarks for per-round tuning overhead and state merge cost."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .contextual import CoMomentState, ContextualThompson
from .stats import ArmStats
from .tuner import Tuner

__all__ = ["LatencyReport", "bench_round", "bench_merge", "run_overhead_suite"]


@dataclass(frozen=True)
class LatencyReport:
    label: str
    rounds: int
    mean_ms: float
    p99_ms: float

    def as_dict(self) -> dict:
        return {"label": self.label, "rounds": self.rounds, "mean_ms": self.mean_ms, "p99_ms": self.p99_ms}


def _report(label: str, samples: np.ndarray) -> LatencyReport:
    ms = samples * 1e3
    return LatencyReport(label, int(ms.size), float(ms.mean()), float(np.percentile(ms, 99)))


def bench_round(features: int | None = None, arms: int = 5, rounds: int = 5000, warmup: int = 200,
                seed: int = 0) -> LatencyReport:
    """Latency of one ``choose`` + ``observe`` pair; ``features=None`` is context-free."""
    rng = np.random.default_rng(seed)
    policy = None if features is None else ContextualThompson(features)
    tuner = Tuner(list(range(arms)), policy, seed=seed)
    contexts = None if features is None else rng.standard_normal((rounds + warmup, features))
    rewards = -rng.uniform(0.5, 2.0, rounds + warmup)
    samples = np.empty(rounds)
    clock = time.perf_counter
    for i in range(rounds + warmup):
        ctx = None if contexts is None else contexts[i]
        t0 = clock()
        _, token = tuner.choose(ctx)
        tuner.observe(token, rewards[i])
        dt = clock() - t0
        if i >= warmup:
            samples[i - warmup] = dt
    label = "context-free" if features is None else f"contextual F={features}"
    return _report(label, samples)


def _filled_state(features: int | None, arms: int, rng, count: int = 200):
    if features is None:
        state = ArmStats.empty(arms)
        for _ in range(count):
            state = state.observe(int(rng.integers(arms)), float(rng.standard_normal()))
        return state
    state = CoMomentState.empty(features, arms)
    for _ in range(count):
        state = state.observe(int(rng.integers(arms)), rng.standard_normal(features), float(rng.standard_normal()))
    return state


def bench_merge(features: int | None = 10, arms: int = 5, repeats: int = 20000, seed: int = 0) -> LatencyReport:
    """Cost of merging two full per-arm states (the store's unit of work)."""
    rng = np.random.default_rng(seed)
    a = _filled_state(features, arms, rng)
    b = _filled_state(features, arms, rng)
    for _ in range(100):
        a.merge(b)
    batches = 20
    per = max(repeats // batches, 1)
    samples = np.empty(batches)
    for i in range(batches):
        t0 = time.perf_counter()
        for _ in range(per):
            a.merge(b)
        samples[i] = (time.perf_counter() - t0) / per
    label = "merge context-free" if features is None else f"merge F={features}"
    return _report(label, samples)


def run_overhead_suite(rounds: int = 5000, seed: int = 0, feature_sizes=(2, 4, 8)) -> list[LatencyReport]:
    out = [bench_round(None, rounds=rounds, seed=seed)]
    out += [bench_round(f, rounds=rounds, seed=seed) for f in feature_sizes]
    out += [bench_merge(None, seed=seed), bench_merge(10, seed=seed)]
    return out
