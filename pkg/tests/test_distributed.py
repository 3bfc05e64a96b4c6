import threading

import numpy as np
import pytest

from conftest import rel_close, two_pass
from adaptune.distributed import (
    DirectChannel,
    DiscreteEventCluster,
    ModelStore,
    Schedule,
    Topology,
    Worker,
    choose_distributed,
    communication_round,
    observe_distributed,
    run_distributed_sim,
    run_threaded,
)
from adaptune.sim import SyntheticConfig, simulate
from adaptune.stats import ArmStats
from adaptune.tuner import Tuner


def stats_from(values, arms=1):
    s = ArmStats.empty(arms)
    for v in values:
        s = s.observe(0, float(v))
    return s


class TestModelStore:
    def test_push_replaces(self):
        store = ModelStore()
        store.push(1, 0, stats_from([1.0]))
        store.push(1, 0, stats_from([1.0, 2.0, 3.0]))
        store.push(1, 1, stats_from([5.0]))
        assert store.aggregate_for(1, 1).n.tolist() == [3]

    def test_excludes_requester(self):
        store = ModelStore()
        store.push(1, 0, stats_from([1.0, 2.0]))
        store.push(1, 1, stats_from([3.0]))
        assert store.aggregate_for(1, 0).n.tolist() == [1]
        assert store.aggregate_for(1, 5).n.tolist() == [3]

    def test_unknown_tuner(self):
        store = ModelStore()
        assert store.aggregate_for(4, 0) is None
        assert store.filtered_aggregate_for(4, 0) is None

    def test_aggregate_matches_two_pass(self, rng):
        chunks = [rng.normal(0, 3, size) for size in (5, 17, 40, 1)]
        store = ModelStore()
        for w, c in enumerate(chunks):
            store.push(1, w, stats_from(c))
        agg = store.aggregate_for(1, 99)
        n, mean, m2 = two_pass(np.concatenate(chunks))
        assert agg.n[0] == n
        assert rel_close(agg.mean[0], mean, 1e-9) and rel_close(agg.m2[0], m2, 1e-9)

    def test_aggregate_independent_of_push_order(self, rng):
        chunks = [rng.normal(0, 1, 30) for _ in range(4)]
        a, b = ModelStore(), ModelStore()
        for w in range(4):
            a.push(1, w, stats_from(chunks[w]))
        for w in reversed(range(4)):
            b.push(1, w, stats_from(chunks[w]))
        assert a.aggregate_for(1, 0).equals(b.aggregate_for(1, 0))


def cluster(n_workers, store=None):
    store = store if store is not None else ModelStore()
    workers = [Worker(w, store) for w in range(n_workers)]
    tuners = [Tuner(range(2), tuner_id=1, worker=wk, seed=wk.worker_id) for wk in workers]
    return store, workers, tuners


def feed(tuner, count, reward=-1.0):
    for _ in range(count):
        _, token = tuner.choose()
        tuner.observe(token, reward)


class TestWorker:
    def test_two_workers_see_all_after_a_round(self):
        _, workers, tuners = cluster(2)
        for t in tuners:
            feed(t, 50)
        for wk in workers:
            communication_round(wk)
        communication_round(workers[0])
        assert tuners[0].decision_state().total == 100
        assert tuners[1].decision_state().total == 100

    def test_nonlocal_excludes_own_data(self):
        _, workers, tuners = cluster(3)
        for i, t in enumerate(tuners):
            feed(t, 10 * (i + 1))
        for _ in range(2):
            for wk in workers:
                assert wk.communication_round()
        assert [t.nonlocal_state.total for t in tuners] == [50, 40, 30]
        assert [t.state.total for t in tuners] == [10, 20, 30]

    def test_partitioned_round_is_skipped(self):
        _, workers, tuners = cluster(2)
        feed(tuners[0], 5)
        workers[0].channel.connected = False
        before = tuners[0].nonlocal_state
        assert not workers[0].communication_round()
        assert workers[0].rounds_skipped == 1
        assert tuners[0].nonlocal_state.equals(before)
        arm, token = tuners[0].choose()
        tuners[0].observe(token, -1.0)
        assert tuners[0].state.total == 6

    def test_eventual_consistency_after_reconnect(self):
        _, workers, tuners = cluster(3)
        workers[2].channel.connected = False
        for t in tuners:
            feed(t, 20)
        for wk in workers:
            wk.communication_round()
        workers[2].channel.connected = True
        for _ in range(2):
            for wk in workers:
                wk.communication_round()
        assert all(t.decision_state().total == 60 for t in tuners)

    def test_worker_without_channel(self):
        wk = Worker(0)
        assert not wk.communication_round()

    def test_choose_distributed_checks_worker(self):
        _, workers, tuners = cluster(2)
        arm, token = choose_distributed(workers[0], tuners[0])
        observe_distributed(workers[0], tuners[0], token, -1.0)
        with pytest.raises(ValueError):
            choose_distributed(workers[1], tuners[0])

    def test_same_tuner_id_shares_slot(self):
        store = ModelStore()
        wk = Worker(0, store)
        a = Tuner(range(2), tuner_id=3, worker=wk, seed=0)
        b = Tuner(range(2), tuner_id=3, worker=wk, seed=1)
        feed(a, 4)
        assert b.state.total == 4
        with pytest.raises(ValueError):
            Tuner(range(5), tuner_id=3, worker=wk)

    def test_concurrent_observes_all_counted(self):
        _, workers, tuners = cluster(1)
        t = tuners[0]

        def body():
            feed(t, 2000)

        threads = [threading.Thread(target=body) for _ in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert t.state.total == 8000

    def test_background_thread_runs(self):
        store = ModelStore()
        workers = [Worker(w, store, interval=0.01) for w in range(2)]
        tuners = [Tuner(range(2), tuner_id=1, worker=wk, seed=0) for wk in workers]
        feed(tuners[0], 7)
        for wk in workers:
            wk.start()
        try:
            deadline = 200
            while tuners[1].nonlocal_state.total < 7 and deadline:
                threading.Event().wait(0.01)
                deadline -= 1
        finally:
            for wk in workers:
                wk.stop()
        assert tuners[1].nonlocal_state.total == 7

    def test_direct_channel_wraps_store(self):
        store = ModelStore()
        assert isinstance(Worker(0, store).channel, DirectChannel)


class TestSchedule:
    def test_in_rounds(self):
        s = Schedule.in_rounds(4, comm_rounds=2, latency_rounds=3, partitions=[(1, 5, 9)])
        assert (s.comm_every, s.latency) == (8, 12)
        assert s.partitioned(1, 5) and s.partitioned(1, 8)
        assert not s.partitioned(1, 9) and not s.partitioned(0, 6)

    def test_permanent_partition(self):
        assert Schedule(partitions=((0, 3, None),)).partitioned(0, 10**6)

    @pytest.mark.parametrize("kwargs", [{"comm_every": 0}, {"latency": -1}, {"partitions": ((0, 5, 2),)}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            Schedule(**kwargs)

    def test_validate_worker_range(self):
        with pytest.raises(ValueError):
            Schedule(partitions=((8, 0, None),)).validate(8)

    def test_topology_validation(self):
        with pytest.raises(ValueError):
            Topology(0)
        with pytest.raises(ValueError):
            Topology(2, "sometimes")


CFG = SyntheticConfig(n=5, rounds=120, trials=1, seed=11)


class TestEngines:
    @pytest.mark.parametrize(
        "topology,schedule",
        [
            (Topology(4, "on"), Schedule.in_rounds(4)),
            (Topology(4, "on"), Schedule.in_rounds(4, comm_rounds=3, latency_rounds=2, partitions=[(2, 10, 60)])),
            (Topology(3, "off"), Schedule.in_rounds(3)),
            (Topology(3, "centralized"), Schedule.in_rounds(3)),
        ],
    )
    def test_cluster_matches_array_engine(self, topology, schedule):
        c = DiscreteEventCluster(CFG, topology, schedule)
        picks = c.run()
        res = run_distributed_sim(CFG, topology, schedule, keep_choices=True)
        assert res.choices[0].tolist() == picks

    def test_zero_latency_every_step_equals_centralized(self):
        cfg = SyntheticConfig(n=5, rounds=200, trials=30, seed=2)
        shared = run_distributed_sim(cfg, Topology(4, "on"), Schedule(comm_every=1), keep_choices=True)
        central = run_distributed_sim(cfg, Topology(4, "centralized"), keep_choices=True)
        assert np.array_equal(shared.choices, central.choices)

    def test_single_worker_equals_simulate(self):
        cfg = SyntheticConfig(n=5, rounds=300, trials=20, seed=4)
        dist = run_distributed_sim(cfg, Topology(1, "on"), keep_choices=True)
        single = simulate(cfg, keep_choices=True)
        assert np.array_equal(dist.choices, single.choices)
        assert np.allclose(dist.p_fastest, single.p_fastest)

    def test_quiesce_gives_full_view(self):
        c = DiscreteEventCluster(CFG, Topology(3, "on"), Schedule.in_rounds(3, latency_rounds=5))
        c.run(50)
        c.quiesce()
        assert all(t.decision_state().total == 150 for t in c.tuners)

    def test_partitioned_worker_still_converges(self):
        cfg = SyntheticConfig(n=5, rounds=1500, trials=40, seed=5)
        sched = Schedule.in_rounds(4, partitions=[(3, 0, None)])
        res = run_distributed_sim(cfg, Topology(4, "on"), sched)
        by_worker = res.extra["p_fastest_by_worker"]
        assert by_worker[-100:, 3].mean() >= 0.8
        assert res.extra["partitioned"][:, 3].all()

    def test_sharing_speeds_convergence(self):
        cfg = SyntheticConfig(n=5, rounds=100, trials=100, seed=6)
        on = run_distributed_sim(cfg, Topology(8, "on"))
        off = run_distributed_sim(cfg, Topology(8, "off"))
        assert on.p_fastest[20:].mean() > off.p_fastest[20:].mean()

    def test_counts_conserved(self):
        cfg = SyntheticConfig(n=5, rounds=40, trials=3, seed=0)
        res = run_distributed_sim(cfg, Topology(4, "on"))
        assert res.counts.sum(axis=-1).tolist() == [160] * 3


def test_threaded_run_with_partition():
    cfg = SyntheticConfig(n=3, rounds=60, trials=1, seed=0)
    run = run_threaded(cfg, Topology(3, "on"), interval=0.01, time_unit=5e-4, partition_worker=1, partition_after=0.0)
    assert [len(p) for p in run.choices] == [60] * 3
    assert run.skipped_rounds[1] >= 1
    assert run.comm_rounds[0] >= 1
