"""Context-free bandit policies.

All selection routines work on arrays of shape ``batch + (arms,)`` and
return one arm index per batch entry, so the same code drives a single
tuner and the lockstep simulation engines. Thin wrappers accept
:class:`~adaptune.stats.ArmStats` and return a plain ``int``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .stats import ArmStats, RunningStat

__all__ = [
    "EXPLORE",
    "is_explore",
    "Thompson",
    "EpsilonGreedy",
    "UCB1",
    "posterior_draws",
    "sample_posterior_mean",
    "thompson_select",
    "eps_greedy_select",
    "ucb1_select",
    "select",
    "ts_choose",
    "eps_greedy_choose",
    "ucb1_choose",
]

# Posterior sample of an arm with too few observations: it beats every finite
# sample, which forces those arms to be tried first.
EXPLORE = math.inf


def is_explore(sample: float) -> bool:
    return sample == EXPLORE


@dataclass(frozen=True)
class Thompson:
    name = "thompson"


@dataclass(frozen=True)
class EpsilonGreedy:
    epsilon: float = 0.1
    name = "epsilon-greedy"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")


@dataclass(frozen=True)
class UCB1:
    c: float = 1.0
    name = "ucb1"

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"c must be positive, got {self.c}")


def posterior_draws(n, mean, m2, rng: np.random.Generator) -> np.ndarray:
    """One draw from each arm's posterior over its mean reward.

    Under a Gaussian model with the noninformative prior the posterior of
    the mean is a Student-t with ``n - 1`` degrees of freedom, centred on the
    sample mean with scale ``sqrt(var / n)``. Arms with ``n < 2`` get
    :data:`EXPLORE`. The amount of randomness consumed does not depend on
    the counts, which keeps seeded runs aligned across code paths.
    """
    n = np.asarray(n)
    ok = n >= 2
    df = np.where(ok, n - 1, 1).astype(float)
    z = rng.standard_normal(n.shape)
    chi = rng.chisquare(df)
    t = z / np.sqrt(chi / df)
    scale = np.sqrt(np.where(ok, m2 / df, 0.0) / np.where(ok, n, 1))
    return np.where(ok, mean + t * scale, EXPLORE)


def sample_posterior_mean(s: RunningStat, rng: np.random.Generator) -> float:
    if s.n < 2:
        return EXPLORE
    return float(posterior_draws(np.array([s.n]), np.array([s.mean]), np.array([s.m2]), rng)[0])


def thompson_select(n, mean, m2, rng: np.random.Generator) -> np.ndarray:
    draws = posterior_draws(n, mean, m2, rng)
    explore = np.asarray(n) < 2
    u = rng.random(explore.shape)
    forced = explore.any(axis=-1, keepdims=True)
    keys = np.where(forced, np.where(explore, u, -1.0), draws)
    return keys.argmax(axis=-1)


def eps_greedy_select(n, mean, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    n = np.asarray(n)
    batch, arms = n.shape[:-1], n.shape[-1]
    u = rng.random(batch)
    random_arm = rng.integers(arms, size=batch)
    greedy = np.where(n == 0, np.inf, mean).argmax(axis=-1)
    return np.where(u < epsilon, random_arm, greedy)


def ucb1_select(n, mean, c: float, t) -> np.ndarray:
    n = np.asarray(n)
    t = np.maximum(np.asarray(t, dtype=float), 1.0)
    bonus = c * np.sqrt(2.0 * np.log(t)[..., None] / np.maximum(n, 1))
    return np.where(n == 0, np.inf, mean + bonus).argmax(axis=-1)


def select(policy, n, mean, m2, rng: np.random.Generator, t=None) -> np.ndarray:
    """Dispatch on a policy value. ``t`` (total rounds) defaults to the sum of counts."""
    if isinstance(policy, Thompson):
        return thompson_select(n, mean, m2, rng)
    if isinstance(policy, EpsilonGreedy):
        return eps_greedy_select(n, mean, policy.epsilon, rng)
    if isinstance(policy, UCB1):
        if t is None:
            t = np.asarray(n).sum(axis=-1)
        return ucb1_select(n, mean, policy.c, t)
    raise TypeError(f"not a context-free policy: {policy!r}")


def _check(state: ArmStats) -> None:
    if state.n.ndim != 1 or state.arms < 1:
        raise ValueError("need an unbatched state with at least one arm")


def ts_choose(state: ArmStats, rng: np.random.Generator) -> int:
    _check(state)
    return int(thompson_select(state.n, state.mean, state.m2, rng))


def eps_greedy_choose(state: ArmStats, epsilon: float, rng: np.random.Generator) -> int:
    _check(state)
    return int(eps_greedy_select(state.n, state.mean, epsilon, rng))


def ucb1_choose(state: ArmStats, c: float, t: int) -> int:
    _check(state)
    return int(ucb1_select(state.n, state.mean, c, t))
