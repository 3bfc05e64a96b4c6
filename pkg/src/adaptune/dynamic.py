"""Epoch-based adaptation for workloads that drift over time or across agents.

Every agent keeps two states per tuner: the aggregate of past epochs that
still look like the present, and the current epoch. Similarity tests decide
which stored states may be pooled with the current one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import stdtr

from .contextual import DEFAULT_LAMBDA, CoMomentState, _fit, min_observations
from .stats import ArmStats, RunningStat

__all__ = [
    "EpochConfig",
    "WelchTest",
    "ModelBallTest",
    "default_test",
    "welch_mask",
    "welch_similar",
    "model_ball_radius",
    "model_ball_similar",
    "AgentLedger",
    "epoch_rollover",
    "decision_state",
    "filtered_aggregate",
    "epoch_due",
]


@dataclass(frozen=True)
class EpochConfig:
    """Epoch length: a number of rounds, a wall-clock duration, or caller-driven boundaries."""

    rounds: int | None = None
    seconds: float | None = None

    def __post_init__(self):
        if self.rounds is not None and self.seconds is not None:
            raise ValueError("give either rounds or seconds, not both")
        if self.rounds is not None and self.rounds < 1:
            raise ValueError("epoch rounds must be >= 1")
        if self.seconds is not None and not self.seconds > 0:
            raise ValueError("epoch seconds must be > 0")

    @property
    def partition_boundary(self) -> bool:
        return self.rounds is None and self.seconds is None


def welch_mask(na, ma, sa, nb, mb, sb, alpha: float, n_min: int):
    """Elementwise Welch test: True where equal means cannot be rejected at ``alpha``."""
    na = np.asarray(na, dtype=float)
    nb = np.asarray(nb, dtype=float)
    floor = max(n_min, 2)
    enough = (na >= floor) & (nb >= floor)
    sa_ = np.where(enough, na, 2.0)
    sb_ = np.where(enough, nb, 2.0)
    qa = np.asarray(sa, dtype=float) / (sa_ - 1) / sa_
    qb = np.asarray(sb, dtype=float) / (sb_ - 1) / sb_
    se2 = qa + qb
    diff = np.abs(np.asarray(ma) - np.asarray(mb))
    flat = se2 <= 0
    safe = np.where(flat, 1.0, se2)
    t = diff / np.sqrt(safe)
    denom = qa * qa / (sa_ - 1) + qb * qb / (sb_ - 1)
    df = np.where(denom > 0, safe * safe / np.where(denom > 0, denom, 1.0), 1.0)
    p = 2.0 * stdtr(df, -t)
    return enough & np.where(flat, diff == 0, p >= alpha)


def welch_similar(a: RunningStat, b: RunningStat, alpha: float = 0.05, n_min: int = 5) -> bool:
    return bool(welch_mask(a.n, a.mean, a.m2, b.n, b.mean, b.m2, alpha, n_min))


def model_ball_radius(n, beta: float):
    n = np.asarray(n, dtype=float)
    return beta * np.sqrt((1.0 + np.log1p(n)) / (1.0 + n))


def _model_ball_mask(a: CoMomentState, b: CoMomentState, beta, n_min, lam):
    if a.mean.shape != b.mean.shape:
        raise ValueError("states have different feature counts")
    enough = (a.n >= n_min) & (b.n >= n_min)
    if not np.any(enough):
        return enough
    wa, _ = _fit(a, lam)
    wb, _ = _fit(b, lam)
    dist = np.linalg.norm(wa - wb, axis=-1)
    return enough & (dist <= model_ball_radius(a.n, beta) + model_ball_radius(b.n, beta))


def model_ball_similar(
    a: CoMomentState, b: CoMomentState, beta: float = 1.0, n_min: int | None = None, lam: float = DEFAULT_LAMBDA
) -> bool:
    if n_min is None:
        n_min = min_observations(a.features)
    return bool(_model_ball_mask(a, b, beta, n_min, lam))


@dataclass(frozen=True)
class WelchTest:
    alpha: float = 0.05
    n_min: int = 5
    per_arm: bool = True

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if self.n_min < 2:
            raise ValueError("n_min must be >= 2")

    def compare(self, a: ArmStats, b: ArmStats) -> np.ndarray:
        mask = welch_mask(a.n, a.mean, a.m2, b.n, b.mean, b.m2, self.alpha, self.n_min)
        return mask if self.per_arm else np.broadcast_to(mask.all(axis=-1, keepdims=True), mask.shape)


@dataclass(frozen=True)
class ModelBallTest:
    beta: float = 1.0
    n_min: int | None = None
    per_arm: bool = True
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.n_min is not None and self.n_min < 2:
            raise ValueError("n_min must be >= 2")

    def compare(self, a: CoMomentState, b: CoMomentState) -> np.ndarray:
        n_min = self.n_min if self.n_min is not None else min_observations(a.features)
        mask = _model_ball_mask(a, b, self.beta, n_min, self.lam)
        return mask if self.per_arm else np.broadcast_to(mask.all(axis=-1, keepdims=True), mask.shape)


def default_test(state):
    return ModelBallTest() if isinstance(state, CoMomentState) else WelchTest()


@dataclass(frozen=True)
class AgentLedger:
    agent_id: int
    old: object
    current: object
    epoch: int = 0

    @classmethod
    def start(cls, agent_id: int, empty) -> "AgentLedger":
        return cls(agent_id, empty, empty.empty_like(), 0)

    def observe(self, arm: int, reward: float, context=None) -> "AgentLedger":
        if context is None:
            cur = self.current.observe(arm, reward)
        else:
            cur = self.current.observe(arm, context, reward)
        return replace(self, current=cur)


def epoch_rollover(ledger: AgentLedger, test) -> AgentLedger:
    """Close the current epoch: pool it into the old aggregate where similar, else replace."""
    similar = test.compare(ledger.old, ledger.current)
    merged = ledger.old.merge(ledger.current)
    kept = merged.masked(similar).merge(ledger.current.masked(~similar))
    return AgentLedger(ledger.agent_id, kept, ledger.current.empty_like(), ledger.epoch + 1)


def decision_state(ledger: AgentLedger, test, nonlocal_state=None):
    """Current epoch, plus the old aggregate on arms where it still matches, plus shared state."""
    similar = test.compare(ledger.old, ledger.current)
    state = ledger.current.merge(ledger.old.masked(similar))
    if nonlocal_state is not None:
        state = state.merge(nonlocal_state)
    return state


def filtered_aggregate(reference, candidates, test):
    """Merge every candidate state, arm by arm, where it passes ``test`` against ``reference``."""
    out = reference.empty_like()
    for cand in candidates:
        out = out.merge(cand.masked(test.compare(reference, cand)))
    return out


def epoch_due(config: EpochConfig, rounds_in_epoch: int, seconds_in_epoch: float) -> bool:
    if config.rounds is not None:
        return rounds_in_epoch >= config.rounds
    if config.seconds is not None:
        return seconds_in_epoch >= config.seconds
    return False

