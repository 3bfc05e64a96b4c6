"""The user-facing tuner: ``choose`` an implementation, run it, ``observe`` a reward."""

from __future__ import annotations

import itertools
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .contextual import CoMomentState, ContextualThompson, ctx_choose
from .dynamic import AgentLedger, EpochConfig, decision_state, default_test, epoch_due, epoch_rollover
from .policies import Thompson, select
from .stats import ArmStats

__all__ = ["TokenError", "Token", "TunerConfig", "Tuner", "DeferredCompletion", "new_tuner", "defer"]

_instance_ids = itertools.count(1)


class TokenError(ValueError):
    """A token was foreign, already observed, or completed twice."""


@dataclass(eq=False)
class Token:
    tuner_id: int
    arm: int
    context: np.ndarray | None
    issued_at: float
    agent_id: int
    epoch: int
    observed: bool = False
    _instance: int = field(default=0, repr=False)


@dataclass
class TunerConfig:
    choices: Sequence[Any]
    policy: Any = field(default_factory=Thompson)
    epochs: EpochConfig | None = None
    similarity: Any = None
    worker: Any = None
    tuner_id: int | None = None
    agent_id: int | None = None
    seed: int | None = None


class _Slot:
    """Shared mutable tuning state for one tuner on one worker (or agent)."""

    def __init__(self, empty, epochs: EpochConfig | None, test, agent_id: int, clock):
        self.lock = threading.Lock()
        self.nonlocal_state = empty.empty_like()
        self.epochs = epochs
        self.test = test if test is not None else default_test(empty)
        self.clock = clock
        if epochs is None:
            self.local = empty
            self.ledger = None
        else:
            self.local = None
            self.ledger = AgentLedger.start(agent_id, empty)
            self.epoch_rounds = 0
            self.epoch_started = clock()
        self.dropped = 0

    @property
    def dynamic(self) -> bool:
        return self.ledger is not None

    @property
    def epoch(self) -> int:
        return self.ledger.epoch if self.ledger is not None else 0

    def own_state(self):
        return self.ledger.current if self.ledger is not None else self.local

    def maybe_roll(self) -> None:
        if self.ledger is None:
            return
        if epoch_due(self.epochs, self.epoch_rounds, self.clock() - self.epoch_started):
            self.roll()

    def roll(self) -> None:
        self.ledger = epoch_rollover(self.ledger, self.test)
        self.epoch_rounds = 0
        self.epoch_started = self.clock()

    def decision(self):
        if self.ledger is None:
            return self.local.merge(self.nonlocal_state)
        return decision_state(self.ledger, self.test, self.nonlocal_state)

    def record(self, arm: int, reward: float, context, epoch: int) -> bool:
        if self.ledger is None:
            self.local = self.local.observe(arm, reward) if context is None else self.local.observe(arm, context, reward)
            return True
        if epoch != self.ledger.epoch:
            self.dropped += 1
            return False
        self.ledger = self.ledger.observe(arm, reward, context)
        return True


class Tuner:
    """Chooses among ``choices`` with a bandit policy and learns from observed rewards.

    Rewards are maximized; pass negative runtimes (see :meth:`observe_elapsed`)
    to maximize throughput. A tuner may be shared across threads.
    """

    def __init__(
        self,
        choices: Sequence[Any],
        policy=None,
        *,
        epochs: EpochConfig | None = None,
        similarity=None,
        worker=None,
        tuner_id: int | None = None,
        agent_id: int | None = None,
        seed: int | None = None,
        rng: np.random.Generator | None = None,
        clock: Callable[[], float] = time.perf_counter,
    ):
        self.choices = list(choices)
        if not self.choices:
            raise ValueError("a tuner needs at least one choice")
        self.policy = policy if policy is not None else Thompson()
        self.contextual = isinstance(self.policy, ContextualThompson)
        arms = len(self.choices)
        empty = CoMomentState.empty(self.policy.features, arms) if self.contextual else ArmStats.empty(arms)
        self._instance = next(_instance_ids)
        self.tuner_id = tuner_id if tuner_id is not None else self._instance
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.clock = clock
        self.worker = worker
        if worker is not None:
            self.agent_id = agent_id if agent_id is not None else worker.worker_id
            self._slot = worker.attach(self, empty, epochs, similarity)
        else:
            self.agent_id = agent_id if agent_id is not None else 0
            self._slot = _Slot(empty, epochs, similarity, self.agent_id, clock)

    @property
    def arms(self) -> int:
        return len(self.choices)

    @property
    def state(self):
        """Snapshot of the locally learned state (the current epoch when dynamic)."""
        with self._slot.lock:
            return self._slot.own_state()

    @property
    def nonlocal_state(self):
        with self._slot.lock:
            return self._slot.nonlocal_state

    @property
    def ledger(self) -> AgentLedger | None:
        with self._slot.lock:
            return self._slot.ledger

    @property
    def dropped(self) -> int:
        return self._slot.dropped

    def decision_state(self):
        with self._slot.lock:
            return self._slot.decision()

    def new_epoch(self) -> None:
        """Close the current epoch now (partition-boundary epochs)."""
        with self._slot.lock:
            if not self._slot.dynamic:
                raise RuntimeError("tuner has no epoch configuration")
            self._slot.roll()

    def choose(self, context=None):
        if self.contextual:
            if context is None:
                raise ValueError("contextual tuner needs a context")
            context = np.asarray(context, dtype=float)
            if context.shape != (self.policy.features,):
                raise ValueError(f"context has shape {context.shape}, tuner expects ({self.policy.features},)")
            if not np.isfinite(context).all():
                raise ValueError("context must be finite")
        elif context is not None:
            raise ValueError("context-free tuner does not take a context")
        slot = self._slot
        with slot.lock:
            slot.maybe_roll()
            state = slot.decision()
            if self.contextual:
                arm = ctx_choose(state, context, self.policy.lam, self.rng)
            else:
                arm = int(select(self.policy, state.n, state.mean, state.m2, self.rng))
            epoch = slot.epoch
            if slot.dynamic:
                slot.epoch_rounds += 1
        token = Token(self.tuner_id, arm, context, self.clock(), self.agent_id, epoch, _instance=self._instance)
        return self.choices[arm], token

    def observe(self, token: Token, reward: float) -> None:
        if not isinstance(token, Token) or token._instance != self._instance:
            raise TokenError("token was not issued by this tuner")
        reward = float(reward)
        if not math.isfinite(reward):
            raise ValueError(f"reward must be finite, got {reward!r}")
        with self._slot.lock:
            if token.observed:
                raise TokenError("token already observed")
            token.observed = True
            self._slot.record(token.arm, reward, token.context, token.epoch)

    def observe_elapsed(self, token: Token) -> float:
        """Observe minus the seconds since ``token`` was issued; returns that reward."""
        reward = -(self.clock() - token.issued_at)
        self.observe(token, reward)
        return reward

    def defer(self, token: Token) -> "DeferredCompletion":
        return DeferredCompletion(self, token)


class DeferredCompletion:
    """Completes a round later, from any thread, exactly once."""

    def __init__(self, tuner: Tuner, token: Token):
        if token.observed:
            raise TokenError("token already observed")
        self.tuner = tuner
        self.token = token
        self._lock = threading.Lock()
        self._done = False
        self.reward: float | None = None

    @property
    def done(self) -> bool:
        return self._done

    def complete(self) -> float:
        with self._lock:
            if self._done:
                raise TokenError("deferred round already completed")
            self._done = True
        self.reward = self.tuner.observe_elapsed(self.token)
        return self.reward

    __call__ = complete


def defer(tuner: Tuner, token: Token) -> DeferredCompletion:
    return DeferredCompletion(tuner, token)


def new_tuner(config: TunerConfig) -> Tuner:
    return Tuner(
        config.choices,
        config.policy,
        epochs=config.epochs,
        similarity=config.similarity,
        worker=config.worker,
        tuner_id=config.tuner_id,
        agent_id=config.agent_id,
        seed=config.seed,
    )
