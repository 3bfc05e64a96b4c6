"""Synthetic tuning simulations with Gaussian runtime variants.

Variant ``i`` of ``n`` has mean runtime ``m ** (i / (n - 1))`` and standard
deviation ``k`` times that, so variant 0 is always the fastest. Trials run
in lockstep on arrays of shape ``(trials, arms)``; the runtime noise for a
round is shared by every variant (common random numbers), which lets the
simulation report an exact always-fastest oracle alongside the tuner.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .policies import Thompson, select

__all__ = [
    "MIN_RUNTIME",
    "VariantSpec",
    "SyntheticConfig",
    "MetricsRecord",
    "SimResult",
    "build_variants",
    "sample_runtime",
    "welford_step",
    "simulate",
    "run_trials",
    "milestones",
    "emit_metrics",
    "read_metrics",
]

MIN_RUNTIME = 1e-6
P_MILESTONES = (0.5, 0.9, 0.99)
THROUGHPUT_ROUNDS = (10, 100, 1000, 10000, 20000)


@dataclass(frozen=True)
class VariantSpec:
    mu: float
    sigma: float


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 5
    m: float = 5.7
    k: float = 0.25
    rounds: int = 20000
    trials: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"need n >= 2 variants, got {self.n}")
        if not self.m >= 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if not self.k >= 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.rounds < 1 or self.trials < 1:
            raise ValueError("rounds and trials must be positive")


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    p_fastest: float
    cum_throughput: float


def build_variants(n: int, m: float, k: float) -> list[VariantSpec]:
    if n < 2 or not m >= 1 or not k >= 0:
        raise ValueError(f"invalid variant parameters n={n} m={m} k={k}")
    mus = [m ** (i / (n - 1)) for i in range(n)]
    return [VariantSpec(mu, k * mu) for mu in mus]


def sample_runtime(v: VariantSpec, rng: np.random.Generator, size=None):
    draw = v.mu + v.sigma * rng.standard_normal(size)
    return np.maximum(draw, MIN_RUNTIME) if size is not None else max(float(draw), MIN_RUNTIME)


def welford_step(n, mean, m2, idx, arm, x):
    """In-place single observation per batch row: ``x[b]`` for arm ``arm[b]``."""
    cnt = n[idx, arm] + 1
    old = mean[idx, arm]
    delta = x - old
    new = old + delta / cnt
    n[idx, arm] = cnt
    mean[idx, arm] = new
    m2[idx, arm] = np.maximum(m2[idx, arm] + delta * (x - new), 0.0)


@dataclass
class SimResult:
    """Per-round series averaged over trials, plus the final per-trial state."""

    p_fastest: np.ndarray
    cum_throughput: np.ndarray
    oracle_throughput: np.ndarray
    counts: np.ndarray
    choices: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def records(self) -> list[MetricsRecord]:
        return [
            MetricsRecord(r + 1, float(p), float(c))
            for r, (p, c) in enumerate(zip(self.p_fastest, self.cum_throughput))
        ]


def simulate(config: SyntheticConfig, policy=None, keep_choices: bool = False) -> SimResult:
    """Single-threaded context-free tuning of the synthetic operator."""
    policy = policy if policy is not None else Thompson()
    variants = build_variants(config.n, config.m, config.k)
    mu = np.array([v.mu for v in variants])
    sigma = np.array([v.sigma for v in variants])
    T, A, R = config.trials, config.n, config.rounds
    rng = np.random.default_rng(config.seed)
    n = np.zeros((T, A), dtype=np.int64)
    mean = np.zeros((T, A))
    m2 = np.zeros((T, A))
    idx = np.arange(T)
    spent = np.zeros(T)
    oracle_spent = np.zeros(T)
    p_fastest = np.empty(R)
    cum = np.empty(R)
    oracle = np.empty(R)
    choices = np.empty((T, R), dtype=np.int16) if keep_choices else None
    for r in range(R):
        arm = select(policy, n, mean, m2, rng, t=np.full(T, r + 1))
        z = rng.standard_normal(T)
        runtime = np.maximum(mu[arm] + sigma[arm] * z, MIN_RUNTIME)
        welford_step(n, mean, m2, idx, arm, -runtime)
        spent += runtime
        oracle_spent += np.maximum(mu[0] + sigma[0] * z, MIN_RUNTIME)
        p_fastest[r] = np.mean(arm == 0)
        cum[r] = np.mean((r + 1) / spent)
        oracle[r] = np.mean((r + 1) / oracle_spent)
        if choices is not None:
            choices[:, r] = arm
    return SimResult(p_fastest, cum, oracle, n, choices)


def run_trials(config: SyntheticConfig, policy=None) -> list[MetricsRecord]:
    return simulate(config, policy).records()


def milestones(records) -> dict:
    """First round reaching each P(fastest) level, and throughput at fixed rounds."""
    first = {}
    for level in P_MILESTONES:
        hit = next((rec.round for rec in records if rec.p_fastest >= level), None)
        first[str(level)] = hit
    by_round = {rec.round: rec.cum_throughput for rec in records}
    tput = {str(r): by_round.get(r) for r in THROUGHPUT_ROUNDS}
    return {"first_round_p_fastest": first, "cum_throughput_at": tput}


def emit_metrics(records, path, config=None, seed=None, extra=None) -> dict:
    """Write ``<path>`` as CSV and a sibling ``.json`` summary; returns the summary."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = list(records)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "p_fastest", "cum_throughput"])
        for rec in records:
            writer.writerow([rec.round, repr(float(rec.p_fastest)), repr(float(rec.cum_throughput))])
    summary = {
        "config": _jsonable(config),
        "seed": seed if seed is not None else getattr(config, "seed", None),
        "milestones": milestones(records),
    }
    if extra:
        summary.update(extra)
    path.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def read_metrics(path) -> list[MetricsRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [MetricsRecord(int(row["round"]), float(row["p_fastest"]), float(row["cum_throughput"])) for row in reader]


def _jsonable(obj):
    if obj is None:
        return None
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj
