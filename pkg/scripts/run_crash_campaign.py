#!/usr/bin/env python3
"""Run a large seeded crash-injection campaign and summarize the losses.

Streams one CSV row per trial so arbitrarily long campaigns run in
constant memory.  The summary groups trials by force policy and prints
the worst completed-but-lost count seen against each trial's bound.
"""

import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from replog.harness import TRIAL_FIELDS, run_crash_trial


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--trials", type=int, default=20_000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="crash_campaign.csv")
    args = parser.parse_args()

    by_freq: dict[int, list[int]] = defaultdict(list)
    armed = violations = 0
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRIAL_FIELDS)
        for i in range(args.trials):
            r = run_crash_trial(args.seed + i)
            writer.writerow([getattr(r, f) for f in TRIAL_FIELDS])
            if r.crash_event >= 0:
                armed += 1
            if not r.passed:
                violations += 1
                print(f"VIOLATION seed {r.seed}: {r.violation}")
            by_freq[r.freq].append(r.lost_completed)

    print(f"{args.trials} trials ({armed} crashed), "
          f"{violations} violations -> {args.out}")
    for freq in sorted(by_freq):
        losses = by_freq[freq]
        label = "sync" if freq == 1 else f"freq:{freq}"
        print(f"  {label:>8}: {len(losses):6d} trials, "
              f"lost max={max(losses)} mean={sum(losses)/len(losses):.2f}")
    return 1 if violations else 0


if __name__ == "__main__":
    sys.exit(main())
