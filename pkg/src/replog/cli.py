"""Command-line front end for the trial harness and scenario player.

Four subcommands: ``crashtest`` runs seeded crash-injection trials,
``windowdist`` samples the unforced-record window under a frequency
policy, ``bench`` times append throughput for one force policy, and
``scenario`` replays a scripted cluster scenario.  Exit codes are 0 for
a clean run, 1 when a check or expectation fails, 2 for unusable
arguments or config.  Everything except bench timing is a pure function
of the seed.
"""

from __future__ import annotations

import argparse
import sys
from collections import Counter
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib  # type: ignore[no-redef]

from . import harness
from .log import parse_policy
from .scenario import ScenarioError, run_scenario

PASS, VIOLATION, USAGE = 0, 1, 2

HISTOGRAM_FIELDS = ["window", "count"]

_TRIAL_KEYS = {"capacity", "writers", "freq", "records"}


class ConfigError(Exception):
    pass


def _load_trial_config(path: Optional[str]) -> dict:
    """Read crashtest overrides from a TOML file; absent keys stay seeded."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    unknown = set(doc) - _TRIAL_KEYS - {"size_min", "size_max"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    overrides = {key: doc[key] for key in _TRIAL_KEYS if key in doc}
    if "size_min" in doc or "size_max" in doc:
        overrides["size_range"] = (doc.get("size_min", 64),
                                   doc.get("size_max", 4096))
    for key, value in overrides.items():
        values = value if isinstance(value, tuple) else (value,)
        if not all(isinstance(v, int) and v > 0 for v in values):
            raise ConfigError(f"{path}: {key} must be a positive integer")
    return overrides


def cmd_crashtest(args: argparse.Namespace) -> int:
    overrides = _load_trial_config(args.config)
    reports = harness.crash_campaign(args.trials, seed=args.seed, **overrides)
    if args.out:
        harness.write_csv(args.out, harness.TRIAL_FIELDS, reports)
    bad = [r for r in reports if not r.passed]
    print(f"crashtest: {len(reports)} trials, {len(bad)} violations")
    for report in bad:
        print(f"  seed {report.seed}: {report.violation}")
    if bad:
        repro = f"replog crashtest --trials 1 --seed {bad[0].seed}"
        if args.config:
            repro += f" --config {args.config}"
        print(f"reproduce with: {repro}")
        return VIOLATION
    return PASS


def cmd_windowdist(args: argparse.Namespace) -> int:
    samples, summary = harness.window_trial(
        args.freq, args.threads, args.trials, seed=args.seed)
    if args.out:
        histogram = sorted(Counter(w for _, w in samples).items())
        harness.write_csv(args.out, HISTOGRAM_FIELDS, histogram)
    print(f"windowdist: freq={summary.freq} threads={summary.threads} "
          f"bound={summary.bound}")
    print(f"  samples={summary.samples} max={summary.max_window} "
          f"below-half={summary.below_half:.3f}")
    if summary.below_half < 0.9:
        print("  note: fewer than 90% of samples fall below half the bound")
    if summary.max_window > summary.bound:
        print(f"  BOUND EXCEEDED: {summary.max_window} > {summary.bound}")
        return VIOLATION
    return PASS


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        policy = parse_policy(args.policy)
    except (ValueError, IndexError):
        print(f"bench: unknown policy {args.policy!r}", file=sys.stderr)
        return USAGE
    result = harness.bench_policy(policy, args.threads, args.record_size,
                                  args.trials)
    if args.out:
        harness.write_csv(args.out, harness.BENCH_FIELDS, [result])
    print(f"bench: {result.policy} threads={result.threads} "
          f"size={result.record_size}")
    print(f"  {result.ops} ops in {result.seconds:.3f}s = "
          f"{result.ops_per_sec:,.0f} ops/s")
    print(f"  latency us: p50={result.p50_us:.1f} p95={result.p95_us:.1f} "
          f"p99={result.p99_us:.1f}")
    return PASS


def cmd_scenario(args: argparse.Namespace) -> int:
    result = run_scenario(args.file)
    for line in result.steps:
        print(f"  {line}")
    if result.failures:
        print(f"scenario {result.name}: {len(result.failures)} failed")
        for line in result.failures:
            print(f"  FAIL {line}")
        return VIOLATION
    print(f"scenario {result.name}: ok")
    return PASS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="replog", description="replicated-log trial harness")
    sub = parser.add_subparsers(dest="command", required=True)

    crash = sub.add_parser("crashtest", help="seeded crash-injection trials")
    crash.add_argument("--config", help="TOML file of workload overrides")
    crash.add_argument("--seed", type=int, default=0)
    crash.add_argument("--trials", type=int, default=1000)
    crash.add_argument("--out", help="write per-trial CSV report here")
    crash.set_defaults(func=cmd_crashtest)

    window = sub.add_parser("windowdist", help="sample unforced-window sizes")
    window.add_argument("--freq", type=int, default=8,
                        help="force every Nth record")
    window.add_argument("--threads", type=int, default=8)
    window.add_argument("--trials", type=int, default=2000,
                        help="appends to run")
    window.add_argument("--seed", type=int, default=0)
    window.add_argument("--out", help="write window histogram CSV here")
    window.set_defaults(func=cmd_windowdist)

    bench = sub.add_parser("bench", help="time appends under one policy")
    bench.add_argument("policy", help="sync, group:N, or freq:N[:T]")
    bench.add_argument("--threads", type=int, default=4)
    bench.add_argument("--record-size", type=int, default=256)
    bench.add_argument("--trials", type=int, default=2000,
                       help="appends per thread")
    bench.add_argument("--out", help="write results CSV here")
    bench.set_defaults(func=cmd_bench)

    scenario = sub.add_parser("scenario", help="replay a scripted scenario")
    scenario.add_argument("file", help="TOML scenario script")
    scenario.set_defaults(func=cmd_scenario)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ScenarioError, FileNotFoundError,
            tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
