"""Command-line entry point.

Exit codes: 0 success, 2 usage or invalid parameters, 3 runtime failure.
Every command writes a JSON summary that echoes its resolved configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .bench import run_overhead_suite
from .contextual import ContextualThompson
from .distributed import Schedule, Topology, run_distributed_sim, run_threaded
from .policies import UCB1, EpsilonGreedy, Thompson
from .scenarios import SCENARIOS, DynamicConfig, DynamicScenario, ranking, run_dynamic
from .sim import SyntheticConfig, _jsonable, emit_metrics, simulate
from .tuner import Tuner

log = logging.getLogger("adaptune")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


def _policy(args):
    if args.policy == "thompson":
        return Thompson()
    if args.policy == "eps-greedy":
        return EpsilonGreedy(args.epsilon)
    return UCB1(args.c)


def _synthetic(args) -> SyntheticConfig:
    return SyntheticConfig(n=args.n, m=args.m, k=args.k, rounds=args.rounds, trials=args.trials, seed=args.seed)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True))


def _echo(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def cmd_simulate(args) -> int:
    config = _synthetic(args)
    result = simulate(config, _policy(args))
    out = Path(args.out)
    summary = emit_metrics(result.records(), out, config, args.seed, {"args": _echo(args)})
    print(json.dumps(summary["milestones"], indent=2))
    print(f"wrote {out} and {out.with_suffix('.json')}")
    return EXIT_OK


def _partitions(args, workers: int):
    if args.partition_worker is None:
        return ()
    if not 0 <= args.partition_worker < workers:
        raise UsageError(f"--partition-worker must be in [0, {workers})")
    return ((args.partition_worker, args.at_round, args.until_round),)


def cmd_distributed(args) -> int:
    config = _synthetic(args)
    topology = Topology(args.workers, args.sharing)
    partitions = _partitions(args, args.workers)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"distributed_w{args.workers}_{args.sharing}"
    if args.mode == "threads":
        run = run_threaded(
            config,
            topology,
            interval=args.interval_ms / 1000.0,
            time_unit=args.time_unit_ms / 1000.0,
            partition_worker=args.partition_worker,
            partition_after=args.partition_after_s,
            policy=_policy(args),
        )
        path = out_dir / f"{stem}_threads.csv"
        tail = max(1, args.rounds // 10)
        rows = []
        for w, picks in enumerate(run.choices):
            p = float(np.mean(np.asarray(picks[-tail:]) == 0)) if picks else 0.0
            rows.append([w, len(picks), p, run.comm_rounds[w], run.skipped_rounds[w], int(w == args.partition_worker)])
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["worker", "rounds", "p_fastest_tail", "comm_rounds", "skipped_rounds", "partitioned"])
            writer.writerows(rows)
        _write_json(path.with_suffix(".json"), {"config": asdict(config), "args": _echo(args), "elapsed_s": run.elapsed})
        print(f"wrote {path}")
        return EXIT_OK

    schedule = Schedule.in_rounds(args.workers, args.comm_rounds, args.latency_rounds, partitions)
    result = run_distributed_sim(config, topology, schedule, _policy(args))
    baseline = None
    if args.baseline and args.sharing != "centralized":
        baseline = run_distributed_sim(config, Topology(args.workers, "centralized"), schedule, _policy(args))
    path = out_dir / f"{stem}.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        head = ["round", "p_fastest", "cum_throughput"]
        if baseline is not None:
            head += ["centralized_p_fastest", "centralized_cum_throughput"]
        writer.writerow(head)
        for r in range(config.rounds):
            row = [r + 1, repr(float(result.p_fastest[r])), repr(float(result.cum_throughput[r]))]
            if baseline is not None:
                row += [repr(float(baseline.p_fastest[r])), repr(float(baseline.cum_throughput[r]))]
            writer.writerow(row)
    workers_path = out_dir / f"{stem}_workers.csv"
    by_worker = result.extra["p_fastest_by_worker"]
    flags = result.extra["partitioned"]
    with workers_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "worker", "p_fastest", "partitioned"])
        for r in range(config.rounds):
            for w in range(args.workers):
                writer.writerow([r + 1, w, repr(float(by_worker[r, w])), int(flags[r, w])])
    summary = {
        "config": asdict(config),
        "topology": asdict(topology),
        "schedule": asdict(schedule),
        "args": _echo(args),
        "final_p_fastest": float(result.p_fastest[-1]),
        "final_cum_throughput": float(result.cum_throughput[-1]),
        "partitioned_workers": sorted({int(w) for w in np.nonzero(flags.any(axis=0))[0]}),
    }
    if baseline is not None:
        summary["centralized_final_p_fastest"] = float(baseline.p_fastest[-1])
    _write_json(path.with_suffix(".json"), summary)
    print(json.dumps({k: summary[k] for k in summary if k.startswith(("final", "centralized", "partitioned"))}, indent=2))
    print(f"wrote {path} and {workers_path}")
    return EXIT_OK


def cmd_dynamic(args) -> int:
    if args.epoch_rounds is not None:
        epoch_rounds = args.epoch_rounds
    else:
        if args.epoch_seconds <= 0 or args.round_ms <= 0:
            raise UsageError("--epoch-seconds and --round-ms must be positive")
        epoch_rounds = max(1, round(args.epoch_seconds * 1000.0 / args.round_ms))
    config = DynamicConfig(
        n=args.n,
        m=args.m,
        k=args.k,
        rounds=args.rounds,
        trials=args.trials,
        seed=args.seed,
        epoch_rounds=epoch_rounds,
        comm_every=args.comm_rounds,
        alpha=args.alpha,
        n_min=args.n_min,
    )
    scenario = DynamicScenario(args.scenario, args.agents, args.segments)
    results = run_dynamic(config, scenario)
    out_dir = Path(args.out_dir)
    for strategy, res in results.items():
        emit_metrics(res.records(), out_dir / f"dynamic_{args.scenario}_{strategy}.csv", config, args.seed)
    ranked = ranking(results)
    summary = {"config": asdict(config), "scenario": asdict(scenario), "args": _echo(args),
               "ranking": [{"strategy": s, "cum_throughput": v} for s, v in ranked]}
    _write_json(out_dir / f"dynamic_{args.scenario}_summary.json", summary)
    for i, (s, v) in enumerate(ranked, 1):
        print(f"{i}. {s:<14} {v:.4f}")
    return EXIT_OK


def cmd_demo_conv(args) -> int:
    from .demos import conv

    if args.signals < 1:
        raise UsageError("--signals must be >= 1")
    rng = np.random.default_rng(args.seed)
    if args.workload == "mixed":
        signals = conv.mixed_workload(args.signals, rng)
    else:
        signals = conv.uniform_workload(args.signals, rng, args.length, args.kernel)
    fixed = {v.__name__.removeprefix("convolve_"): conv.run_fixed(signals, v) for v in conv.VARIANTS}
    if args.mode == "contextual":
        tuner = Tuner(conv.VARIANTS, ContextualThompson(4, args.lam), seed=args.seed)
        features = "random" if args.features == "random-only" else "dims"
    else:
        tuner = Tuner(conv.VARIANTS, Thompson(), seed=args.seed)
        features = "none"
    adaptive = conv.adaptive_convolve(signals, tuner, features, np.random.default_rng([args.seed, 1]))
    oracle = np.min(np.array([run.per_signal for run in fixed.values()]), axis=0)
    path = Path(args.out_dir) / f"demo_conv_{args.mode}_{args.features}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["signal", "n", "kk", *[f"{name}_s" for name in fixed], "adaptive_s", "adaptive_arm", "oracle_s"])
        for i, sig in enumerate(signals):
            writer.writerow([i, sig.n, sig.kk, *[run.per_signal[i] for run in fixed.values()],
                             adaptive.per_signal[i], adaptive.arms[i], oracle[i]])
    mismatch = max(
        float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-300))
        for a, b in zip(adaptive.outputs, fixed["direct"].outputs)
    )
    throughput = {name: len(signals) / float(np.sum(run.per_signal)) for name, run in fixed.items()}
    throughput["adaptive"] = len(signals) / float(np.sum(adaptive.per_signal))
    throughput["oracle"] = len(signals) / float(np.sum(oracle))
    summary = {"args": _echo(args), "throughput_per_s": throughput, "max_relative_mismatch": mismatch,
               "arm_counts": np.bincount(adaptive.arms, minlength=3).tolist()}
    _write_json(path.with_suffix(".json"), summary)
    print(json.dumps(throughput, indent=2))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_demo_join(args) -> int:
    from .demos import join

    if args.partitions < 1:
        raise UsageError("--partitions must be >= 1")
    rng = np.random.default_rng(args.seed)
    tables = join.skewed_tables(rng, args.small, args.large, args.keys, args.partitions)
    tuner = Tuner(join.JOIN_VARIANTS, Thompson(), seed=args.seed)
    rows, results = [], []
    for i, it in enumerate(join.adaptive_join(tables, tuner)):
        for row in it:
            results.append(row)
            if args.consumer_delay_us > 0:
                time.sleep(args.consumer_delay_us * 1e-6)
        rows.append([i, it.arm, it.completion.reward])
    reference = Counter(join.hash_join(tables.left, tables.right))
    path = Path(args.out_dir) / "demo_join.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["partition", "arm", "reward_s"])
        writer.writerows(rows)
    arms = np.array([r[1] for r in rows])
    summary = {
        "args": _echo(args),
        "partitions": len(rows),
        "observations": tuner.state.total,
        "hash_fraction_last_100": float(np.mean(arms[-100:] == 0)),
        "result_rows": len(results),
        "matches_reference": Counter(results) == reference,
    }
    _write_json(path.with_suffix(".json"), summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "args"}, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    reports = run_overhead_suite(args.rounds, args.seed, tuple(args.features))
    for rep in reports:
        print(f"{rep.label:<22} mean {rep.mean_ms * 1e3:9.2f} us   p99 {rep.p99_ms * 1e3:9.2f} us")
    _write_json(Path(args.out_dir) / "bench_overhead.json", {"args": _echo(args), "reports": [r.as_dict() for r in reports]})
    return EXIT_OK


def _add_synthetic(p, rounds=20000, trials=200):
    p.add_argument("--n", type=int, default=5, help="number of variants")
    p.add_argument("--m", type=float, default=5.7, help="slowest/fastest mean ratio")
    p.add_argument("--k", type=float, default=0.25, help="std as a multiple of the mean")
    p.add_argument("--rounds", type=int, default=rounds)
    p.add_argument("--trials", type=int, default=trials)


def _add_policy(p):
    p.add_argument("--policy", choices=("thompson", "eps-greedy", "ucb1"), default="thompson")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--c", type=float, default=1.0, help="UCB1 exploration scale")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="results")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="adaptune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="single tuner on the synthetic workload")
    _add_synthetic(p)
    _add_policy(p)
    p.add_argument("--out", default="results/simulate.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("distributed", parents=[common], help="workers sharing state through a model store")
    _add_synthetic(p, trials=50)
    _add_policy(p)
    p.add_argument("--workers", type=int, default=8)
    p.add_argument("--sharing", choices=("on", "off", "centralized"), default="on")
    p.add_argument("--mode", choices=("discrete", "threads"), default="discrete")
    p.add_argument("--comm-rounds", type=int, default=1, help="rounds between communication rounds (discrete)")
    p.add_argument("--latency-rounds", type=int, default=0, help="one-way message latency in rounds (discrete)")
    p.add_argument("--partition-worker", type=int, default=None)
    p.add_argument("--at-round", type=int, default=0, help="partition start round (discrete)")
    p.add_argument("--until-round", type=int, default=None, help="partition end round (discrete; default never)")
    p.add_argument("--partition-after-s", type=float, default=1.0, help="partition start (threads)")
    p.add_argument("--interval-ms", type=float, default=500.0, help="communication interval (threads)")
    p.add_argument("--time-unit-ms", type=float, default=1.0, help="wall time per synthetic time unit (threads)")
    p.add_argument("--baseline", action=argparse.BooleanOptionalAction, default=True,
                   help="also run the centralized tuner for comparison")
    p.set_defaults(func=cmd_distributed)

    p = sub.add_parser("dynamic", parents=[common], help="five sharing strategies on a changing workload")
    _add_synthetic(p, rounds=DynamicConfig.rounds, trials=DynamicConfig.trials)
    p.add_argument("--scenario", choices=SCENARIOS, default="vary-both")
    p.add_argument("--agents", type=int, default=8)
    p.add_argument("--segments", type=int, default=4, help="time segments for the vary-time scenarios")
    p.add_argument("--epoch-rounds", type=int, default=None, help="epoch length in rounds (overrides seconds)")
    p.add_argument("--epoch-seconds", type=float, default=15.0)
    p.add_argument("--round-ms", type=float, default=15.0, help="virtual duration of one round")
    p.add_argument("--comm-rounds", type=int, default=DynamicConfig.comm_every)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n-min", type=int, default=5)
    p.set_defaults(func=cmd_dynamic)

    demo = sub.add_parser("demo", help="adaptive operator demos")
    dsub = demo.add_subparsers(dest="demo", required=True)
    p = dsub.add_parser("conv", parents=[common], help="contextual 1-D convolution")
    p.add_argument("--mode", choices=("contextual", "context-free"), default="contextual")
    p.add_argument("--features", choices=("dims", "random-only"), default="dims")
    p.add_argument("--workload", choices=("mixed", "uniform"), default="mixed")
    p.add_argument("--signals", type=int, default=1000)
    p.add_argument("--length", type=int, default=4096, help="signal length (uniform workload)")
    p.add_argument("--kernel", type=int, default=256, help="kernel length (uniform workload)")
    p.add_argument("--lam", type=float, default=1.0, help="ridge regularization lambda")
    p.set_defaults(func=cmd_demo_conv)
    p = dsub.add_parser("join", parents=[common], help="partitioned join with deferred rewards")
    p.add_argument("--partitions", type=int, default=512)
    p.add_argument("--small", type=int, default=2000)
    p.add_argument("--large", type=int, default=400000)
    p.add_argument("--keys", type=int, default=200000)
    p.add_argument("--consumer-delay-us", type=float, default=0.0, help="sleep per consumed row")
    p.set_defaults(func=cmd_demo_join)

    p = sub.add_parser("bench-overhead", parents=[common], help="choose+observe latency and merge cost")
    p.add_argument("--rounds", type=int, default=5000)
    p.add_argument("--features", type=int, nargs="+", default=[2, 4, 8])
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, TypeError) as exc:
        print(f"adaptune {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        log.debug("command failed", exc_info=True)
        print(f"adaptune {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
