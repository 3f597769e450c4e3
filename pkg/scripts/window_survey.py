#!/usr/bin/env python3
"""Sample unforced-window sizes over a grid of (freq, threads) settings.

Writes one histogram CSV per combination and prints a table of the
observed maximum against the freq*threads bound, plus the fraction of
samples below half the bound.
"""

import argparse
import sys
from collections import Counter
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from replog.harness import window_trial, write_csv


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--combos", default="2x3,8x8,8x16,16x16",
                        help="comma list of FREQxTHREADS pairs")
    parser.add_argument("--appends", type=int, default=20_000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", default=".")
    args = parser.parse_args()

    combos = []
    for item in args.combos.split(","):
        freq, threads = item.lower().split("x")
        combos.append((int(freq), int(threads)))

    exceeded = False
    print(f"{'combo':>10} {'bound':>6} {'max':>5} {'below-half':>11} samples")
    for freq, threads in combos:
        samples, summary = window_trial(freq, threads, args.appends,
                                        seed=args.seed)
        path = Path(args.out_dir) / f"windows_f{freq}_t{threads}.csv"
        histogram = sorted(Counter(w for _, w in samples).items())
        write_csv(str(path), ["window", "count"], histogram)
        flag = ""
        if summary.max_window > summary.bound:
            exceeded = True
            flag = "  BOUND EXCEEDED"
        print(f"{freq:>7}x{threads:<2} {summary.bound:>6} "
              f"{summary.max_window:>5} {summary.below_half:>10.1%} "
              f"{summary.samples:>7}{flag}")
    return 1 if exceeded else 0


if __name__ == "__main__":
    sys.exit(main())
