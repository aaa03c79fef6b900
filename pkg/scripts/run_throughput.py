#!/usr/bin/env python3
"""Loopback pipeline throughput with a per-stage breakdown.

    python scripts/run_throughput.py --votes 10000 --repeats 3
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys

from qvote.bench import throughput_bench


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--votes", type=int, default=10_000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--repeats", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-fsync", action="store_true")
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)

    reports = [
        throughput_bench(args.votes, seed=args.seed + r, workers=args.workers, fsync=not args.no_fsync)
        for r in range(args.repeats)
    ]
    rates = [r.votes_per_sec for r in reports]
    if args.json:
        print(json.dumps({"runs": [r.to_dict() for r in reports], "median_votes_per_sec": statistics.median(rates)}))
        return 0
    for i, report in enumerate(reports):
        print(f"# run {i + 1}\n{report.to_table()}\n")
    print(f"median {statistics.median(rates):.1f} votes/s over {len(rates)} run(s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
