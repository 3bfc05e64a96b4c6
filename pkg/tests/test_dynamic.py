import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import two_pass
from adaptune.contextual import CoMomentState
from adaptune.distributed import ModelStore, Worker
from adaptune.dynamic import (
    AgentLedger,
    EpochConfig,
    ModelBallTest,
    WelchTest,
    decision_state,
    default_test,
    epoch_due,
    epoch_rollover,
    filtered_aggregate,
    model_ball_radius,
    model_ball_similar,
    welch_mask,
    welch_similar,
)
from adaptune.scenarios import DynamicConfig, DynamicScenario, run_dynamic
from adaptune.stats import ArmStats, RunningStat
from adaptune.tuner import Tuner


class AlwaysSimilar:
    def compare(self, a, b):
        return np.ones(np.shape(a.n), dtype=bool)


def arm_stats(samples_per_arm):
    """ArmStats built from one array of rewards per arm."""
    stats = [RunningStat(*two_pass(v)) for v in samples_per_arm]
    return ArmStats.from_stats(stats)


def observe_all(ledger, arm, values):
    for v in values:
        ledger = ledger.observe(arm, float(v))
    return ledger


class TestEpochConfig:
    def test_rounds_xor_seconds(self):
        with pytest.raises(ValueError):
            EpochConfig(rounds=10, seconds=1.0)

    @pytest.mark.parametrize("kwargs", [{"rounds": 0}, {"seconds": 0.0}, {"seconds": -1.0}])
    def test_invalid_lengths(self, kwargs):
        with pytest.raises(ValueError):
            EpochConfig(**kwargs)

    def test_due(self):
        assert epoch_due(EpochConfig(rounds=5), 5, 0.0)
        assert not epoch_due(EpochConfig(rounds=5), 4, 100.0)
        assert epoch_due(EpochConfig(seconds=2.0), 0, 2.0)
        assert not epoch_due(EpochConfig(), 10**9, 1e9)
        assert EpochConfig().partition_boundary


class TestWelch:
    def test_too_few_observations_is_dissimilar(self):
        a = RunningStat(*two_pass([1.0]))
        b = RunningStat(*two_pass(np.arange(20.0)))
        assert not welch_similar(a, b, n_min=1)
        assert not welch_similar(a, b)

    def test_below_n_min_is_dissimilar(self):
        a = RunningStat(*two_pass([1.0, 2.0, 3.0, 4.0]))
        assert not welch_similar(a, a, n_min=5)
        assert welch_similar(a, a, n_min=4)

    def test_same_distribution_is_mostly_similar(self, rng):
        trials, n = 500, 1000
        a = rng.standard_normal((trials, n))
        b = rng.standard_normal((trials, n))
        sa = ((a - a.mean(1, keepdims=True)) ** 2).sum(1)
        sb = ((b - b.mean(1, keepdims=True)) ** 2).sum(1)
        mask = welch_mask(n, a.mean(1), sa, n, b.mean(1), sb, alpha=0.01, n_min=5)
        assert mask.mean() >= 0.98

    def test_far_means_are_dissimilar(self, rng):
        trials, n = 2000, 100
        a = rng.standard_normal((trials, n))
        b = 10 + rng.standard_normal((trials, n))
        sa = ((a - a.mean(1, keepdims=True)) ** 2).sum(1)
        sb = ((b - b.mean(1, keepdims=True)) ** 2).sum(1)
        mask = welch_mask(n, a.mean(1), sa, n, b.mean(1), sb, alpha=0.05, n_min=5)
        assert 1 - mask.mean() >= 0.999

    def test_zero_variance_needs_equal_means(self):
        a = RunningStat(*two_pass([2.0] * 6))
        b = RunningStat(*two_pass([3.0] * 6))
        assert welch_similar(a, a)
        assert not welch_similar(a, b)

    def test_symmetric(self, rng):
        a = RunningStat(*two_pass(rng.normal(0, 1, 30)))
        b = RunningStat(*two_pass(rng.normal(0.3, 2, 12)))
        assert welch_similar(a, b) == welch_similar(b, a)

    def test_per_arm_independent(self, rng):
        same = rng.standard_normal(200)
        a = arm_stats([same, rng.standard_normal(200)])
        b = arm_stats([same, 50 + rng.standard_normal(200)])
        assert WelchTest().compare(a, b).tolist() == [True, False]
        assert WelchTest(per_arm=False).compare(a, b).tolist() == [False, False]

    @pytest.mark.parametrize("kwargs", [{"alpha": 0.0}, {"alpha": 1.0}, {"n_min": 1}])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ValueError):
            WelchTest(**kwargs)


def ctx_state(rng, n, slope, features=2):
    s = CoMomentState.empty(features, 1)
    for _ in range(n):
        x = rng.standard_normal(features)
        s = s.observe(0, x, float(slope * x[0] + 0.1 * rng.standard_normal()))
    return s


class TestModelBall:
    def test_radius_shrinks(self):
        r = model_ball_radius(np.array([1, 10, 100, 1000]), 1.0)
        assert np.all(np.diff(r) < 0)
        assert model_ball_radius(0, 2.0) == pytest.approx(2.0)

    def test_identical_states_similar(self, rng):
        s = ctx_state(rng, 50, 1.0)
        assert model_ball_similar(s[0], s[0])

    def test_opposite_slopes_dissimilar(self, rng):
        a = ctx_state(rng, 500, 1.0)
        b = ctx_state(rng, 500, -1.0)
        assert not model_ball_similar(a[0], b[0])

    def test_same_model_similar(self, rng):
        a = ctx_state(rng, 500, 1.0)
        b = ctx_state(rng, 500, 1.0)
        assert model_ball_similar(a[0], b[0])

    def test_below_n_min_dissimilar(self, rng):
        s = ctx_state(rng, 3, 1.0)
        assert not model_ball_similar(s[0], s[0])
        assert ModelBallTest().compare(s, s).tolist() == [False]

    def test_default_test_dispatch(self):
        assert isinstance(default_test(ArmStats.empty(2)), WelchTest)
        assert isinstance(default_test(CoMomentState.empty(2, 2)), ModelBallTest)


class TestRollover:
    def test_first_rollover_copies_current(self, rng):
        led = observe_all(AgentLedger.start(0, ArmStats.empty(2)), 0, rng.standard_normal(20))
        rolled = epoch_rollover(led, WelchTest())
        assert rolled.old.equals(led.current)
        assert rolled.current.total == 0 and rolled.epoch == 1

    def test_stationary_stream_accumulates(self, rng):
        led = AgentLedger.start(0, ArmStats.empty(1))
        test = WelchTest(alpha=0.01)
        for _ in range(3):
            led = epoch_rollover(observe_all(led, 0, rng.normal(5, 1, 500)), test)
        assert led.old.n[0] >= 1000
        assert led.old.n[0] == 1500

    def test_shift_replaces_old(self, rng):
        led = observe_all(AgentLedger.start(0, ArmStats.empty(1)), 0, rng.normal(0, 1, 500))
        led = epoch_rollover(led, WelchTest())
        led = observe_all(led, 0, rng.normal(10, 1, 500))
        shifted = led.current
        led = epoch_rollover(led, WelchTest())
        assert led.old.equals(shifted)

    @given(st.lists(st.lists(st.floats(-100, 100), max_size=30), min_size=1, max_size=6))
    def test_memory_bounded_and_no_contamination(self, epochs):
        led = AgentLedger.start(0, ArmStats.empty(1))
        seen = 0
        for values in epochs:
            led = observe_all(led, 0, values)
            seen += len(values)
            cur = led.current
            led = epoch_rollover(led, WelchTest())
            # old is either current pooled with the previous old, or exactly current
            assert led.old.n[0] <= seen
            assert led.old.n[0] >= cur.n[0]
            assert isinstance(led.old, ArmStats) and led.old.n.shape == (1,)

    def test_decision_state_masks_dissimilar_old(self, rng):
        led = observe_all(AgentLedger.start(0, ArmStats.empty(2)), 0, rng.normal(0, 1, 100))
        led = observe_all(led, 1, rng.normal(0, 1, 100))
        led = epoch_rollover(led, WelchTest())
        led = observe_all(led, 0, rng.normal(0, 1, 100))
        led = observe_all(led, 1, rng.normal(30, 1, 100))
        d = decision_state(led, WelchTest())
        assert d.n.tolist() == [200, 100]

    def test_decision_state_adds_nonlocal(self, rng):
        led = observe_all(AgentLedger.start(0, ArmStats.empty(1)), 0, [1.0, 2.0])
        other = ArmStats.empty(1).observe(0, 3.0)
        assert decision_state(led, WelchTest(), other).n.tolist() == [3]


class TestFilteredAggregate:
    def test_identical_regime_matches_unfiltered(self, rng):
        kept = []
        for _ in range(20):
            mine = arm_stats([rng.normal(-1, 0.2, 200), rng.normal(-2, 0.2, 200)])
            others = [arm_stats([rng.normal(-1, 0.2, 200), rng.normal(-2, 0.2, 200)]) for _ in range(7)]
            filt = filtered_aggregate(mine, others, WelchTest())
            kept.append(filt.total / sum(o.total for o in others))
        assert np.mean(kept) >= 0.9

    def test_unique_regime_keeps_little(self, rng):
        mine = arm_stats([rng.normal(-1, 0.2, 200), rng.normal(-2, 0.2, 200)])
        others = [arm_stats([rng.normal(-2, 0.2, 200), rng.normal(-1, 0.2, 200)]) for _ in range(7)]
        filt = filtered_aggregate(mine, others, WelchTest())
        assert filt.total <= 0.05 * sum(o.total for o in others)

    def test_requester_below_n_min_gets_nothing(self, rng):
        mine = arm_stats([rng.normal(0, 1, 3), rng.normal(0, 1, 3)])
        others = [arm_stats([rng.normal(0, 1, 100), rng.normal(0, 1, 100)]) for _ in range(3)]
        assert filtered_aggregate(mine, others, WelchTest()).total == 0


def drive(tuners, workers, rounds, seed, comm_every):
    """Round-robin decisions with deterministic rewards; returns every choice in order."""
    rng = np.random.default_rng(seed)
    mus = np.array([1.0, 1.5, 2.0, 2.5])
    picks = []
    for r in range(rounds):
        for t in tuners:
            arm, token = t.choose()
            t.observe(token, -(mus[arm] + 0.3 * rng.standard_normal()))
            picks.append(arm)
        if (r + 1) % comm_every == 0:
            for wk in workers:
                for m in wk.outgoing()[0::2]:
                    wk.channel.send(m)
            for wk in workers:
                for m in wk.outgoing()[1::2]:
                    wk.receive(wk.channel.send(m))
    return picks


class TestDynamicSharing:
    def test_always_similar_reduces_to_plain_sharing(self):
        store = ModelStore(tests={1: AlwaysSimilar()})
        workers = [Worker(w, store) for w in range(3)]
        tuners = [
            Tuner(range(4), tuner_id=1, worker=wk, epochs=EpochConfig(rounds=40), similarity=AlwaysSimilar(), seed=[7, wk.worker_id])
            for wk in workers
        ]
        dynamic = drive(tuners, workers, 300, 3, comm_every=5)

        store = ModelStore()
        workers = [Worker(w, store) for w in range(3)]
        tuners = [Tuner(range(4), tuner_id=1, worker=wk, seed=[7, wk.worker_id]) for wk in workers]
        plain = drive(tuners, workers, 300, 3, comm_every=5)
        assert dynamic == plain

    def test_store_filters_other_agents(self, rng):
        store = ModelStore()
        empty = ArmStats.empty(1)
        near = empty.observe(0, 0.0)
        mine = arm_stats([rng.normal(0, 1, 50)])
        same = arm_stats([rng.normal(0, 1, 50)])
        far = arm_stats([rng.normal(40, 1, 50)])
        store.push_agent(1, 0, empty, mine)
        store.push_agent(1, 1, near, same)
        store.push_agent(1, 2, empty, far)
        got = store.filtered_aggregate_for(1, 0)
        assert got.n.tolist() == [50]
        assert store.filtered_aggregate_for(9, 0) is None

    def test_swapped_means_converge_to_own_best(self):
        trials = 20
        perm = np.tile(np.array([[0, 1, 2, 3, 4], [4, 3, 2, 1, 0]])[None, None], (trials, 1, 1, 1))
        switches = np.zeros((trials, 0), dtype=int)
        cfg = DynamicConfig(rounds=2000, trials=trials, epoch_rounds=1000)
        res = run_dynamic(cfg, DynamicScenario("vary-threads", 2, 1), ("dynamic", "all-shared", "local-only"),
                          assignment=(switches, perm))
        assert res["dynamic"].p_fastest[-10:].mean() >= 0.9
        assert res["local-only"].cum_throughput[-1] > res["all-shared"].cum_throughput[-1]

    def test_identical_regime_shares_like_plain(self):
        trials = 20
        perm = np.tile(np.arange(5)[None, None, None], (trials, 1, 2, 1))
        switches = np.zeros((trials, 0), dtype=int)
        cfg = DynamicConfig(rounds=2000, trials=trials, epoch_rounds=1000)
        res = run_dynamic(cfg, DynamicScenario("stationary", 2, 1), ("dynamic", "all-shared"),
                          assignment=(switches, perm))
        gap = res["all-shared"].p_fastest[200:] - res["dynamic"].p_fastest[200:]
        assert abs(gap.mean()) <= 0.05

    def test_bad_assignment_shape(self):
        cfg = DynamicConfig(rounds=10, trials=2)
        with pytest.raises(ValueError):
            run_dynamic(cfg, DynamicScenario("stationary", 2, 1), assignment=(np.zeros((2, 0)), np.zeros((2, 1, 3, 5))))
