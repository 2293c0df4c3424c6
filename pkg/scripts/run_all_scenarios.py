"""Run every bundled scenario and print a one-line verdict per scenario."""
import argparse
from pathlib import Path

from genie_sim import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs", help="directory for per-scenario outputs")
    ap.add_argument("--seed", type=int, help="override every scenario's seed")
    args = ap.parse_args()
    for path in harness.bundled_scenarios():
        sc = harness.load_scenario(path)
        if args.seed is not None:
            sc = sc.with_seed(args.seed)
        report, _ = harness.run(sc, Path(args.out) / sc.name)
        failed = [k for k, v in report.invariants.items() if not v["passed"]]
        print(f"{sc.name:14s} seed={sc.seed:<6d} invariants={'ok' if not failed else ','.join(failed)} "
              f"expectations={'ok' if report.as_expected else 'MISMATCH'} {report.timing:.2f}s")


if __name__ == "__main__":
    main()
