#!/usr/bin/env python3
"""Key-size stability sweep against the closed-form oracle.

    python scripts/run_sweep.py --trials 100000 --out sweep.csv
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from qvote.bb84 import NoiseModel
from qvote.bench import DEFAULT_SIZES, key_size_sweep


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=list(DEFAULT_SIZES))
    ap.add_argument("--trials", type=int, default=100_000)
    ap.add_argument("--noise-max", type=float, default=0.2)
    ap.add_argument("--eve", action="store_true")
    ap.add_argument("--max-attempts", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None, help="also write CSV here")
    args = ap.parse_args(argv)

    noise = NoiseModel.uniform(args.noise_max, eavesdropper=args.eve)
    report = key_size_sweep(args.sizes, args.trials, noise, args.seed, max_attempts=args.max_attempts)
    print(report.to_table())
    worst = max(report.points, key=lambda p: p.oracle_gap)
    print(f"\nlargest oracle gap: {worst.oracle_gap:.4f} ({worst.interpretation}, size {worst.size})")
    if args.out is not None:
        args.out.write_text(report.to_csv())
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
