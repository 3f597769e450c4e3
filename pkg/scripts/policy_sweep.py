#!/usr/bin/env python3
"""Bench append throughput for each force policy across thread counts.

Wall-clock numbers on the emulated persistence domain; only relative
comparisons mean anything.  One CSV row per (policy, threads) cell.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from replog.harness import BENCH_FIELDS, bench_policy, write_csv
from replog.log import parse_policy


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--policies", default="sync,group:128,freq:8",
                        help="comma list of policy specs")
    parser.add_argument("--threads", default="1,2,4,8,16",
                        help="comma list of thread counts")
    parser.add_argument("--record-size", type=int, default=256)
    parser.add_argument("--ops", type=int, default=3000,
                        help="appends per thread")
    parser.add_argument("--out", default="policy_sweep.csv")
    args = parser.parse_args()

    rows = []
    print(f"{'policy':>12} {'threads':>7} {'ops/s':>12} {'p50us':>8} {'p99us':>8}")
    for spec in args.policies.split(","):
        for threads in (int(t) for t in args.threads.split(",")):
            if spec.startswith("freq:") and spec.count(":") == 1:
                policy = parse_policy(f"{spec}:{threads}")
            else:
                policy = parse_policy(spec)
            result = bench_policy(policy, threads, args.record_size, args.ops)
            rows.append(result)
            print(f"{result.policy:>12} {threads:>7} "
                  f"{result.ops_per_sec:>12,.0f} {result.p50_us:>8.1f} "
                  f"{result.p99_us:>8.1f}")
    write_csv(args.out, BENCH_FIELDS, rows)
    print(f"-> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
