"""Multi-agent simulations where the fastest variant differs by agent and over time.

Each agent sees the synthetic variants from :mod:`.sim` under a permutation
that maps its arms to variants. The scenario decides how permutations vary:

``stationary``    identity for every agent, all the time
``vary-threads``  one permutation per agent, fixed over time
``vary-time``     one permutation per time segment, shared by all agents
``vary-both``     one permutation per agent and time segment

Five strategies run on identical environment randomness:

``dynamic``        epoch ledger + similarity-filtered sharing
``all-shared``     every observation, shared through the store
``local-only``     every observation, never shared
``recent-shared``  current epoch only, shared
``recent-local``   current epoch only, not shared
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamic import welch_mask
from .policies import thompson_select
from .sim import MIN_RUNTIME, SimResult, build_variants, welford_step
from .stats import merge_many, merge_moments

__all__ = ["SCENARIOS", "STRATEGIES", "DynamicScenario", "DynamicConfig", "build_assignment", "run_dynamic", "ranking"]

SCENARIOS = ("stationary", "vary-threads", "vary-time", "vary-both")
STRATEGIES = ("dynamic", "all-shared", "local-only", "recent-shared", "recent-local")


@dataclass(frozen=True)
class DynamicScenario:
    kind: str = "vary-both"
    agents: int = 8
    segments: int = 4

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}; pick one of {', '.join(SCENARIOS)}")
        if self.agents < 1 or self.segments < 1:
            raise ValueError("agents and segments must be positive")


@dataclass(frozen=True)
class DynamicConfig:
    n: int = 5
    m: float = 5.7
    k: float = 0.25
    rounds: int = 12000
    trials: int = 8
    seed: int = 0
    epoch_rounds: int = 1000
    comm_every: int = 10
    alpha: float = 0.05
    n_min: int = 5

    def __post_init__(self):
        if self.n < 2 or not self.m >= 1 or not self.k >= 0:
            raise ValueError("invalid variant parameters")
        if min(self.rounds, self.trials, self.epoch_rounds, self.comm_every) < 1:
            raise ValueError("rounds, trials, epoch_rounds and comm_every must be positive")


def _switch_points(rng, rounds: int, segments: int) -> np.ndarray:
    base = rounds / segments
    jitter = rng.uniform(-0.25, 0.25, segments - 1) * base
    return np.round(base * np.arange(1, segments) + jitter).astype(int)


def _perms(rng, count: int, arms: int, previous=None) -> np.ndarray:
    out = np.empty((count, arms), dtype=np.int64)
    for i in range(count):
        while True:
            p = rng.permutation(arms)
            if previous is None or np.argmin(p) != np.argmin(previous[i]):
                break
        out[i] = p
    return out


def build_assignment(scenario: DynamicScenario, arms: int, rounds: int, trials: int, rng):
    """Per-trial switch rounds ``(T, S-1)`` and arm-to-variant maps ``(T, S, G, A)``."""
    G, S = scenario.agents, scenario.segments
    timed = scenario.kind in ("vary-time", "vary-both")
    segs = S if timed else 1
    switches = np.zeros((trials, segs - 1), dtype=int)
    perm = np.empty((trials, segs, G, arms), dtype=np.int64)
    for t in range(trials):
        if timed:
            switches[t] = _switch_points(rng, rounds, segs)
        prev = None
        for s in range(segs):
            if scenario.kind == "stationary":
                cur = np.tile(np.arange(arms), (G, 1))
            elif scenario.kind == "vary-threads":
                cur = _perms(rng, G, arms)
            elif scenario.kind == "vary-time":
                cur = np.tile(_perms(rng, 1, arms, None if prev is None else prev[:1]), (G, 1))
            else:
                cur = _perms(rng, G, arms, prev)
            perm[t, s] = cur
            prev = cur
    return switches, perm


def _merge3(a, b):
    return merge_moments(a[0], a[1], a[2], b[0], b[1], b[2])


def _mask3(s, keep):
    return np.where(keep, s[0], 0), np.where(keep, s[1], 0.0), np.where(keep, s[2], 0.0)


def _empty(shape):
    return np.zeros(shape, dtype=np.int64), np.zeros(shape), np.zeros(shape)


def _others(store, G):
    """For each requester g, the merge over h != g; store arrays are ``(T, G, A)``."""
    off = ~np.eye(G, dtype=bool)[None, :, :, None]
    n = np.where(off, store[0][:, None], 0)
    m2 = np.where(off, store[2][:, None], 0.0)
    mean = np.broadcast_to(store[1][:, None], n.shape)
    return merge_many(n, mean, m2, axis=2)


def _filtered(cur_store, old_store, G, alpha, n_min):
    """Per requester: merge of other agents' (old, current) states that pass Welch against the requester's current."""
    cand = [np.stack([o, c], axis=2) for o, c in zip(old_store, cur_store)]  # (T, G, 2, A)
    cand = [x[:, None] for x in cand]  # (T, 1, Gsrc, 2, A)
    ref = [x[:, :, None, None] for x in cur_store]  # (T, Greq, 1, 1, A)
    ok = welch_mask(ref[0], ref[1], ref[2], cand[0], cand[1], cand[2], alpha, n_min)
    ok &= ~np.eye(G, dtype=bool)[None, :, :, None, None]
    n = np.where(ok, cand[0], 0)
    m2 = np.where(ok, cand[2], 0.0)
    mean = np.broadcast_to(cand[1], n.shape)
    T, A = n.shape[0], n.shape[-1]
    return merge_many(n.reshape(T, G, 2 * G, A), mean.reshape(T, G, 2 * G, A), m2.reshape(T, G, 2 * G, A), axis=2)


def _run_strategy(strategy: str, config: DynamicConfig, scenario: DynamicScenario, mu, switches, perm) -> SimResult:
    T, G, A, R = config.trials, scenario.agents, config.n, config.rounds
    env = np.random.default_rng([config.seed, 1])
    rng = np.random.default_rng([config.seed, 2])
    shared = strategy in ("dynamic", "all-shared", "recent-shared")
    epochal = strategy in ("dynamic", "recent-shared", "recent-local")
    shape = (T, G, A)
    own = _empty(shape)
    old = _empty(shape)
    remote = _empty(shape)
    flat_idx = np.arange(T * G)
    t_idx = np.arange(T)[:, None]
    g_idx = np.arange(G)[None, :]
    spent = np.zeros(T)
    oracle_spent = np.zeros(T)
    p_fastest = np.empty(R)
    cum = np.empty(R)
    oracle = np.empty(R)
    seg = np.zeros(T, dtype=int)
    for r in range(R):
        if switches.shape[1]:
            seg = (switches <= r).sum(axis=1)
        mapping = perm[t_idx, seg[:, None], g_idx]  # (T, G, A)
        state = own
        if strategy == "dynamic":
            keep = welch_mask(old[0], old[1], old[2], own[0], own[1], own[2], config.alpha, config.n_min)
            state = _merge3(state, _mask3(old, keep))
        if shared:
            state = _merge3(state, remote)
        arm = thompson_select(state[0], state[1], state[2], rng)  # (T, G)
        variant = mapping[t_idx, g_idx, arm]
        z = env.standard_normal((T, G))
        runtime = np.maximum(mu[variant] * (1.0 + config.k * z), MIN_RUNTIME)
        welford_step(own[0].reshape(T * G, A), own[1].reshape(T * G, A), own[2].reshape(T * G, A),
                     flat_idx, arm.reshape(-1), -runtime.reshape(-1))
        spent += runtime.sum(axis=1)
        oracle_spent += np.maximum(mu[0] * (1.0 + config.k * z), MIN_RUNTIME).sum(axis=1)
        p_fastest[r] = np.mean(variant == 0)
        cum[r] = np.mean((r + 1) * G / spent)
        oracle[r] = np.mean((r + 1) * G / oracle_spent)

        if shared and (r + 1) % config.comm_every == 0:
            if strategy == "dynamic":
                remote = _filtered(own, old, G, config.alpha, config.n_min)
            else:
                remote = _others(own, G)
        if epochal and (r + 1) % config.epoch_rounds == 0:
            if strategy == "dynamic":
                keep = welch_mask(old[0], old[1], old[2], own[0], own[1], own[2], config.alpha, config.n_min)
                merged = _merge3(old, own)
                old = tuple(np.where(keep, a, b) for a, b in zip(merged, own))
            else:
                remote = _empty(shape)
            own = _empty(shape)
    return SimResult(p_fastest, cum, oracle, own[0])


def run_dynamic(config: DynamicConfig, scenario: DynamicScenario, strategies=STRATEGIES, assignment=None) -> dict:
    """Run each strategy on the same environment; returns ``{strategy: SimResult}``.

    ``assignment`` overrides the random ``(switches, perm)`` pair from
    :func:`build_assignment` with a hand-built one of the same shapes.
    """
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}")
    mu = np.array([v.mu for v in build_variants(config.n, config.m, config.k)])
    if assignment is None:
        rng = np.random.default_rng([config.seed, 0])
        switches, perm = build_assignment(scenario, config.n, config.rounds, config.trials, rng)
    else:
        switches, perm = (np.asarray(a) for a in assignment)
        G, A = scenario.agents, config.n
        if perm.ndim != 4 or perm.shape[0] != config.trials or perm.shape[2:] != (G, A):
            raise ValueError(f"perm must have shape (trials, segments, {G}, {A})")
        if switches.shape != (config.trials, perm.shape[1] - 1):
            raise ValueError("switches must have shape (trials, segments - 1)")
    return {s: _run_strategy(s, config, scenario, mu, switches, perm) for s in strategies}


def ranking(results: dict) -> list[tuple[str, float]]:
    """Strategies sorted by final cumulative throughput, best first."""
    final = {s: float(r.cum_throughput[-1]) for s, r in results.items()}
    return sorted(final.items(), key=lambda kv: -kv[1])
