"""Online selection between interchangeable operator implementations with bandits."""

from .contextual import CoMomentState, ContextualThompson, ctx_merge, ctx_update, fit_model
from .distributed import DiscreteEventCluster, ModelStore, Schedule, Topology, Worker, run_distributed_sim
from .dynamic import AgentLedger, EpochConfig, ModelBallTest, WelchTest, model_ball_similar, welch_similar
from .policies import UCB1, EpsilonGreedy, Thompson
from .scenarios import DynamicConfig, DynamicScenario, run_dynamic
from .sim import SyntheticConfig, build_variants, emit_metrics, run_trials, simulate
from .stats import ArmStats, RunningStat, stat_merge, stat_update
from .tuner import DeferredCompletion, Token, TokenError, Tuner, TunerConfig, defer, new_tuner

__version__ = "0.1.0"

__all__ = [
    "AgentLedger",
    "ArmStats",
    "CoMomentState",
    "ContextualThompson",
    "DeferredCompletion",
    "DiscreteEventCluster",
    "DynamicConfig",
    "DynamicScenario",
    "EpochConfig",
    "EpsilonGreedy",
    "ModelBallTest",
    "ModelStore",
    "RunningStat",
    "Schedule",
    "SyntheticConfig",
    "Thompson",
    "Token",
    "TokenError",
    "Topology",
    "Tuner",
    "TunerConfig",
    "UCB1",
    "WelchTest",
    "Worker",
    "build_variants",
    "ctx_merge",
    "ctx_update",
    "defer",
    "emit_metrics",
    "fit_model",
    "model_ball_similar",
    "new_tuner",
    "run_distributed_sim",
    "run_dynamic",
    "run_trials",
    "simulate",
    "stat_merge",
    "stat_update",
    "welch_similar",
]
