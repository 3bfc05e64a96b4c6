"""Distributed tuning: per-worker local/non-local states and a central model store.

Workers update only their local state on ``observe`` and decide on the
transient merge of local and non-local state. Periodically each worker
pushes its local state to the store and pulls back the merge of every other
worker's latest push. Both messages use the binary layout in :mod:`.wire`.

Three ways to run it:

* :class:`Worker` with :meth:`Worker.start` - real threads, wall-clock interval.
* :class:`DiscreteEventCluster` - the same Worker/ModelStore objects driven
  by a virtual clock with message latency and partitions.
* :func:`run_distributed_sim` - an array engine with the same schedule that
  runs many trials in lockstep for Monte Carlo experiments.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import wire
from .dynamic import default_test, filtered_aggregate
from .policies import Thompson, select
from .sim import MIN_RUNTIME, SimResult, SyntheticConfig, build_variants, welford_step
from .stats import merge_moments
from .tuner import Tuner, _Slot
from .wire import Kind, Message, Record

log = logging.getLogger(__name__)

__all__ = [
    "ModelStore",
    "store_aggregate_for",
    "DirectChannel",
    "Worker",
    "choose_distributed",
    "observe_distributed",
    "communication_round",
    "Topology",
    "Schedule",
    "DiscreteEventCluster",
    "run_distributed_sim",
    "ThreadedRun",
    "run_threaded",
]

DEFAULT_INTERVAL = 0.5


class ModelStore:
    """Registry of each worker's (or agent's) latest pushed state, per tuner."""

    def __init__(self, tests: dict | None = None):
        self._lock = threading.Lock()
        self.states: dict[int, dict[int, object]] = {}
        self.agents: dict[int, dict[int, tuple]] = {}
        self.tests = dict(tests or {})

    def push(self, tuner_id: int, worker_id: int, state) -> None:
        with self._lock:
            self.states.setdefault(tuner_id, {})[worker_id] = state

    def aggregate_for(self, tuner_id: int, worker_id: int):
        """Merge of every stored state except the requester's; ``None`` for an unknown tuner."""
        with self._lock:
            stored = self.states.get(tuner_id)
            if not stored:
                return None
            others = [stored[w] for w in sorted(stored) if w != worker_id]
            like = next(iter(stored.values()))
        out = like.empty_like()
        for s in others:
            out = out.merge(s)
        return out

    def push_agent(self, tuner_id: int, agent_id: int, old, current) -> None:
        with self._lock:
            self.agents.setdefault(tuner_id, {})[agent_id] = (old, current)

    def filtered_aggregate_for(self, tuner_id: int, agent_id: int):
        """Merge of other agents' states that pass the similarity test against the requester's current."""
        with self._lock:
            stored = self.agents.get(tuner_id)
            if not stored:
                return None
            like = next(iter(stored.values()))[1]
            mine = stored.get(agent_id)
            candidates = [s for a in sorted(stored) if a != agent_id for s in stored[a]]
            test = self.tests.get(tuner_id) or default_test(like)
        if mine is None:
            return like.empty_like()
        return filtered_aggregate(mine[1], candidates, test)

    def handle(self, data: bytes) -> bytes | None:
        msg = wire.decode(data)
        if msg.kind == Kind.PUSH:
            for rec in msg.records:
                self.push(rec.tuner_id, msg.worker_id, rec.states[0])
            return None
        if msg.kind == Kind.PULL_REQUEST:
            recs = [Record(r.tuner_id, (self.aggregate_for(r.tuner_id, msg.worker_id),)) for r in msg.records]
            return wire.encode(Message(Kind.PULL_REPLY, msg.worker_id, recs))
        if msg.kind == Kind.DYNAMIC_PUSH:
            for rec in msg.records:
                self.push_agent(rec.tuner_id, rec.agent_id, *rec.states)
            return None
        if msg.kind == Kind.DYNAMIC_PULL_REQUEST:
            recs = [
                Record(r.tuner_id, (self.filtered_aggregate_for(r.tuner_id, r.agent_id),), r.agent_id)
                for r in msg.records
            ]
            return wire.encode(Message(Kind.DYNAMIC_PULL_REPLY, msg.worker_id, recs))
        raise wire.WireError(f"store cannot handle {msg.kind.name}")


def store_aggregate_for(store: ModelStore, tuner_id: int, worker_id: int):
    return store.aggregate_for(tuner_id, worker_id)


class DirectChannel:
    """In-process, in-order channel to a store. Set ``connected = False`` to partition."""

    def __init__(self, store: ModelStore):
        self.store = store
        self.connected = True

    def send(self, data: bytes) -> bytes | None:
        if not self.connected:
            raise ConnectionError("store unreachable")
        return self.store.handle(data)


class Worker:
    """Holds the shared local/non-local state pair of every tuner on this worker."""

    def __init__(self, worker_id: int, channel=None, interval: float = DEFAULT_INTERVAL):
        if isinstance(channel, ModelStore):
            channel = DirectChannel(channel)
        self.worker_id = worker_id
        self.channel = channel
        self.interval = interval
        self.slots: dict[tuple, _Slot] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.rounds_completed = 0
        self.rounds_skipped = 0

    def attach(self, tuner: Tuner, empty, epochs, similarity) -> _Slot:
        # Non-dynamic tuners with the same id share one slot per worker; dynamic
        # tuners get one slot per agent.
        key = (tuner.tuner_id, tuner.agent_id if epochs is not None else None)
        with self._lock:
            slot = self.slots.get(key)
            if slot is None:
                slot = _Slot(empty, epochs, similarity, tuner.agent_id, tuner.clock)
                self.slots[key] = slot
            elif type(slot.own_state()) is not type(empty) or slot.own_state().n.shape != empty.n.shape:
                raise ValueError(f"tuner {tuner.tuner_id} already registered with a different shape")
            return slot

    def outgoing(self) -> list[bytes]:
        """Push messages followed by pull requests for every attached tuner."""
        with self._lock:
            items = sorted(self.slots.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1]))
        plain, dynamic = [], []
        for (tid, agent), slot in items:
            with slot.lock:
                if slot.dynamic:
                    dynamic.append((tid, slot.ledger.agent_id, slot.ledger.old, slot.ledger.current))
                else:
                    plain.append((tid, slot.local))
        out = []
        if plain:
            out.append(wire.encode(Message(Kind.PUSH, self.worker_id, [Record(t, (s,)) for t, s in plain])))
            out.append(wire.encode(Message(Kind.PULL_REQUEST, self.worker_id, [Record(t) for t, _ in plain])))
        if dynamic:
            pushes = [Record(t, (old, cur), a) for t, a, old, cur in dynamic]
            pulls = [Record(t, (), a) for t, a, _, _ in dynamic]
            out.append(wire.encode(Message(Kind.DYNAMIC_PUSH, self.worker_id, pushes)))
            out.append(wire.encode(Message(Kind.DYNAMIC_PULL_REQUEST, self.worker_id, pulls)))
        return out

    def receive(self, data: bytes) -> None:
        msg = wire.decode(data)
        dynamic = msg.kind == Kind.DYNAMIC_PULL_REPLY
        if not dynamic and msg.kind != Kind.PULL_REPLY:
            raise wire.WireError(f"worker cannot handle {msg.kind.name}")
        for rec in msg.records:
            slot = self.slots.get((rec.tuner_id, rec.agent_id if dynamic else None))
            if slot is None:
                continue
            with slot.lock:
                state = rec.states[0]
                slot.nonlocal_state = state if state is not None else slot.nonlocal_state.empty_like()

    def communication_round(self) -> bool:
        """Push then pull through the channel. Returns False (and changes nothing) when partitioned."""
        if self.channel is None:
            return False
        try:
            replies = [self.channel.send(m) for m in self.outgoing()]
        except ConnectionError:
            self.rounds_skipped += 1
            return False
        for reply in replies:
            if reply is not None:
                self.receive(reply)
        self.rounds_completed += 1
        return True

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, name=f"worker-{self.worker_id}-comm", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def _loop(self) -> None:
        while not self._stop.wait(self.interval):
            try:
                self.communication_round()
            except Exception:  # keep the background thread alive
                log.exception("communication round failed on worker %d", self.worker_id)


def choose_distributed(worker: Worker, tuner: Tuner, context=None):
    if tuner.worker is not worker:
        raise ValueError("tuner is not registered on this worker")
    return tuner.choose(context)


def observe_distributed(worker: Worker, tuner: Tuner, token, reward: float) -> None:
    if tuner.worker is not worker:
        raise ValueError("tuner is not registered on this worker")
    tuner.observe(token, reward)


def communication_round(worker: Worker, store: ModelStore | None = None) -> bool:
    if store is not None and worker.channel is None:
        worker.channel = DirectChannel(store)
    return worker.communication_round()


@dataclass(frozen=True)
class Topology:
    workers: int = 8
    sharing: str = "on"

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if self.sharing not in ("on", "off", "centralized"):
            raise ValueError(f"sharing must be on, off or centralized, got {self.sharing!r}")


@dataclass(frozen=True)
class Schedule:
    """Discrete-event timeline. Time is counted in decisions ("steps").

    Workers take turns round-robin, so round ``r`` covers steps
    ``r*W .. r*W + W - 1``. A communication round starts after every
    ``comm_every`` steps; each message arrives ``latency`` steps after it is
    sent. ``partitions`` holds ``(worker, from_round, until_round)``
    triples; ``until_round=None`` means permanent.
    """

    comm_every: int = 8
    latency: int = 0
    partitions: tuple = ()

    def __post_init__(self):
        if self.comm_every < 1:
            raise ValueError("comm_every must be >= 1")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")
        for part in self.partitions:
            w, start, until = part
            if start < 0 or (until is not None and until < start):
                raise ValueError(f"invalid partition {part!r}")

    @classmethod
    def in_rounds(cls, workers: int, comm_rounds: int = 1, latency_rounds: int = 0, partitions=()):
        return cls(comm_rounds * workers, latency_rounds * workers, tuple(partitions))

    def partitioned(self, worker: int, rnd: int) -> bool:
        for w, start, until in self.partitions:
            if w == worker and rnd >= start and (until is None or rnd < until):
                return True
        return False

    def validate(self, workers: int) -> None:
        for w, _, _ in self.partitions:
            if not 0 <= w < workers:
                raise ValueError(f"partition names worker {w}, topology has {workers}")


class _EventQueue:
    def __init__(self):
        self._heap = []
        self._seq = itertools.count()

    def put(self, due: int, item) -> None:
        heapq.heappush(self._heap, (due, next(self._seq), item))

    def pop_due(self, now: int):
        while self._heap and self._heap[0][0] <= now:
            due, _, item = heapq.heappop(self._heap)
            yield due, item


class DiscreteEventCluster:
    """Worker/ModelStore objects on a virtual clock, driving the synthetic workload.

    Uses one seeded generator for policy and runtime draws, in the same order
    as :func:`run_distributed_sim` with a single trial, so the two engines
    make identical decisions for the same seed.
    """

    def __init__(self, config: SyntheticConfig, topology: Topology, schedule: Schedule, policy=None):
        schedule.validate(topology.workers)
        self.config = config
        self.topology = topology
        self.schedule = schedule
        self.rng = np.random.default_rng(config.seed)
        self.variants = build_variants(config.n, config.m, config.k)
        self.store = ModelStore()
        policy = policy if policy is not None else Thompson()
        choices = list(range(config.n))
        if topology.sharing == "centralized":
            shared = Tuner(choices, policy, tuner_id=1, rng=self.rng)
            self.workers = [Worker(w) for w in range(topology.workers)]
            self.tuners = [shared] * topology.workers
        else:
            self.workers = [Worker(w) for w in range(topology.workers)]
            self.tuners = [Tuner(choices, policy, tuner_id=1, worker=wk, rng=self.rng) for wk in self.workers]
        self.events = _EventQueue()
        self.choices: list[int] = []
        self.runtimes: list[float] = []
        self.step = 0

    def _deliver(self, now: int) -> None:
        for due, (kind, w, data) in self.events.pop_due(now):
            if kind == "store":
                reply = self.store.handle(data)
                if reply is not None:
                    self.events.put(due + self.schedule.latency, ("worker", w, reply))
            elif not self.schedule.partitioned(w, now // self.topology.workers):
                self.workers[w].receive(data)

    def _communicate(self, now: int) -> None:
        rnd = now // self.topology.workers
        sends = []
        for wk in self.workers:
            if self.schedule.partitioned(wk.worker_id, rnd):
                continue
            sends.append((wk.worker_id, wk.outgoing()))
        # All pushes go out before any pull request so zero-latency pulls see every push.
        for w, msgs in sends:
            for m in msgs[0::2]:
                self.events.put(now + self.schedule.latency, ("store", w, m))
        for w, msgs in sends:
            for m in msgs[1::2]:
                self.events.put(now + self.schedule.latency, ("store", w, m))

    def run(self, rounds: int | None = None) -> list[int]:
        rounds = rounds if rounds is not None else self.config.rounds
        W = self.topology.workers
        for _ in range(rounds * W):
            now = self.step
            self._deliver(now)
            w = now % W
            tuner = self.tuners[w]
            arm, token = tuner.choose()
            v = self.variants[arm]
            z = self.rng.standard_normal(1)[0]
            runtime = max(v.mu + v.sigma * z, MIN_RUNTIME)
            tuner.observe(token, -runtime)
            self.choices.append(arm)
            self.runtimes.append(runtime)
            if self.topology.sharing == "on" and (now + 1) % self.schedule.comm_every == 0:
                self._communicate(now)
                self._deliver(now)
            self.step += 1
        return self.choices

    def quiesce(self) -> None:
        """Deliver everything in flight, then run one full push/pull round for every worker."""
        far = self.step + 10 * (self.schedule.latency + 1)
        self._deliver(far)
        for wk in self.workers:
            for m in wk.outgoing()[0::2]:
                self.store.handle(m)
        for wk in self.workers:
            for m in wk.outgoing()[1::2]:
                reply = self.store.handle(m)
                if reply is not None:
                    wk.receive(reply)


def run_distributed_sim(
    config: SyntheticConfig,
    topology: Topology,
    schedule: Schedule | None = None,
    policy=None,
    keep_choices: bool = False,
) -> SimResult:
    """Lockstep Monte Carlo of the distributed architecture.

    Round ``r`` of the result aggregates the ``W`` decisions of that round
    over all trials. ``extra`` carries per-worker P(fastest) and
    per-worker partition flags.
    """
    schedule = schedule if schedule is not None else Schedule(comm_every=topology.workers)
    schedule.validate(topology.workers)
    policy = policy if policy is not None else Thompson()
    variants = build_variants(config.n, config.m, config.k)
    mu = np.array([v.mu for v in variants])
    sigma = np.array([v.sigma for v in variants])
    T, A, R, W = config.trials, config.n, config.rounds, topology.workers
    rng = np.random.default_rng(config.seed)
    idx = np.arange(T)
    groups = 1 if topology.sharing == "centralized" else W

    def zeros():
        return np.zeros((groups, T, A), dtype=np.int64), np.zeros((groups, T, A)), np.zeros((groups, T, A))

    ln, lmean, lm2 = zeros()
    rn, rmean, rm2 = zeros()
    sn, smean, sm2 = zeros()
    events = _EventQueue()
    sharing = topology.sharing == "on"

    spent = np.zeros(T)
    oracle_spent = np.zeros(T)
    p_fastest = np.empty(R)
    p_worker = np.empty((R, W))
    cum = np.empty(R)
    oracle = np.empty(R)
    flags = np.zeros((R, W), dtype=bool)
    choices = np.empty((T, R * W), dtype=np.int16) if keep_choices else None

    def deliver(now):
        for due, (kind, w, payload) in events.pop_due(now):
            if kind == "push":
                sn[w], smean[w], sm2[w] = payload
            elif kind == "pull":
                # w lists the requesters; each gets the in-order merge of everyone else,
                # computed for all requesters at once.
                req = np.asarray(w)
                n = np.zeros((len(req), T, A), dtype=np.int64)
                mean, m2 = np.zeros((len(req), T, A)), np.zeros((len(req), T, A))
                for v in range(W):
                    take = (req != v)[:, None, None]
                    mn, mm, ms = merge_moments(n, mean, m2, sn[v], smean[v], sm2[v])
                    n, mean, m2 = np.where(take, mn, n), np.where(take, mm, mean), np.where(take, ms, m2)
                for i, v in enumerate(req):
                    events.put(due + schedule.latency, ("reply", int(v), (n[i], mean[i], m2[i])))
            elif not schedule.partitioned(w, now // W):
                rn[w], rmean[w], rm2[w] = payload

    for r in range(R):
        hits = np.zeros(W)
        for w in range(W):
            flags[r, w] = schedule.partitioned(w, r)
            step = r * W + w
            deliver(step)
            g = 0 if groups == 1 else w
            if sharing:
                n, mean, m2 = merge_moments(ln[g], lmean[g], lm2[g], rn[g], rmean[g], rm2[g])
            else:
                n, mean, m2 = ln[g], lmean[g], lm2[g]
            arm = select(policy, n, mean, m2, rng)
            z = rng.standard_normal(T)
            runtime = np.maximum(mu[arm] + sigma[arm] * z, MIN_RUNTIME)
            welford_step(ln[g], lmean[g], lm2[g], idx, arm, -runtime)
            spent += runtime
            oracle_spent += np.maximum(mu[0] + sigma[0] * z, MIN_RUNTIME)
            hits[w] = np.mean(arm == 0)
            if choices is not None:
                choices[:, step] = arm
            if sharing and (step + 1) % schedule.comm_every == 0:
                live = [v for v in range(W) if not schedule.partitioned(v, r)]
                for v in live:
                    events.put(step + schedule.latency, ("push", v, (ln[v].copy(), lmean[v].copy(), lm2[v].copy())))
                if live:
                    events.put(step + schedule.latency, ("pull", live, None))
                deliver(step)
        p_worker[r] = hits
        p_fastest[r] = hits.mean()
        cum[r] = np.mean((r + 1) * W / spent)
        oracle[r] = np.mean((r + 1) * W / oracle_spent)
    counts = ln.sum(axis=0)
    return SimResult(
        p_fastest,
        cum,
        oracle,
        counts,
        choices,
        extra={"p_fastest_by_worker": p_worker, "partitioned": flags},
    )


@dataclass
class ThreadedRun:
    choices: list
    comm_rounds: list
    skipped_rounds: list
    elapsed: float


def run_threaded(
    config: SyntheticConfig,
    topology: Topology,
    interval: float = DEFAULT_INTERVAL,
    time_unit: float = 1e-3,
    partition_worker: int | None = None,
    partition_after: float | None = None,
    policy=None,
) -> ThreadedRun:
    """Real threads: one decision loop per worker, each with a background communication thread.

    Each synthetic runtime is slept for ``runtime * time_unit`` seconds.
    ``partition_worker`` loses its channel ``partition_after`` seconds in.
    Not deterministic: thread interleaving decides message timing.
    """
    store = ModelStore()
    policy = policy if policy is not None else Thompson()
    variants = build_variants(config.n, config.m, config.k)
    choices = list(range(config.n))
    sharing = topology.sharing
    shared_tuner = None
    workers = [Worker(w, store if sharing == "on" else None, interval) for w in range(topology.workers)]
    if sharing == "centralized":
        shared_tuner = Tuner(choices, policy, tuner_id=1, seed=config.seed)
    tuners = [
        shared_tuner if shared_tuner is not None else Tuner(choices, policy, tuner_id=1, worker=wk, seed=[config.seed, wk.worker_id])
        for wk in workers
    ]
    picks = [[] for _ in workers]

    def body(w: int) -> None:
        rng = np.random.default_rng([config.seed, w, 1])
        for _ in range(config.rounds):
            arm, token = tuners[w].choose()
            v = variants[arm]
            runtime = max(v.mu + v.sigma * rng.standard_normal(), MIN_RUNTIME)
            if time_unit > 0:
                time.sleep(runtime * time_unit)
            tuners[w].observe(token, -runtime)
            picks[w].append(arm)

    start = time.perf_counter()
    if sharing == "on":
        for wk in workers:
            wk.start()
    threads = [threading.Thread(target=body, args=(w,), name=f"worker-{w}-ops") for w in range(len(workers))]
    for t in threads:
        t.start()
    timer = None
    if sharing == "on" and partition_worker is not None:
        channel = workers[partition_worker].channel

        def cut():
            channel.connected = False

        timer = threading.Timer(partition_after or 0.0, cut)
        timer.start()
    for t in threads:
        t.join()
    if timer is not None:
        timer.cancel()
    for wk in workers:
        wk.stop()
    return ThreadedRun(
        picks,
        [wk.rounds_completed for wk in workers],
        [wk.rounds_skipped for wk in workers],
        time.perf_counter() - start,
    )
