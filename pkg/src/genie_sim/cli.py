"""Command-line entry point: run, verify, inspect."""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness


def _run(args) -> int:
    try:
        scenario = harness.load_scenario(args.scenario)
    except harness.ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    report, _ = harness.run(scenario, args.out)
    for name, res in {**report.invariants, **report.assertions}.items():
        mark = "PASS" if res["passed"] else "FAIL"
        print(f"{mark} {name}" + (f"  ({res['detail']})" if res["detail"] else ""))
    print(f"{'ok' if report.passed else 'FAILED'}: {scenario.name} seed={scenario.seed} in {report.timing:.2f}s")
    return 0 if report.passed else 1


def _verify(args) -> int:
    check = harness.verify(args.chain)
    if check.ok:
        print("ok")
        return 0
    where = f" at block {check.index}" if check.index is not None else ""
    print(f"invalid{where}: {check.reason}")
    return 1


def _inspect(args) -> int:
    try:
        data = harness.inspect(args.repo, args.hash)
    except ValueError:
        print("malformed hash", file=sys.stderr)
        return 2
    if data is None:
        print("not found or corrupt", file=sys.stderr)
        return 1
    try:
        sys.stdout.write(data.decode())
    except UnicodeDecodeError:
        sys.stdout.write(data.hex() + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="genie-sim", description="Simulated genomic data marketplace")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="execute a scenario and check invariants")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=_run)
    v = sub.add_parser("verify", help="re-validate a chain dump")
    v.add_argument("--chain", required=True)
    v.set_defaults(func=_verify)
    i = sub.add_parser("inspect", help="print a blob from an exported repository")
    i.add_argument("--repo", required=True)
    i.add_argument("--hash", required=True)
    i.set_defaults(func=_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
