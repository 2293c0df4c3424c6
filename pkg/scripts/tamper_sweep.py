"""Flip single bits in a scenario's chain and report how close to the tamper site validation fails."""
import argparse
from collections import Counter

from genie_sim import crypto, harness
from genie_sim.ledger import tamper_bit, validate_chain


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default=str(harness.bundled("baseline.json")))
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    state = harness.execute_scenario(harness.load_scenario(args.scenario))
    chain = state.world.chain
    rng = crypto.Rng(args.seed)
    offsets, fields, reasons = Counter(), Counter(), Counter()
    for _ in range(args.trials):
        blocks = list(chain.blocks)
        i = rng.randint(0, len(blocks) - 1)
        blocks[i], field = tamper_bit(blocks[i], rng)
        check = validate_chain(blocks, chain.miners, chain.allocation)
        offsets["undetected" if check.ok else check.index - i] += 1
        fields[field] += 1
        reasons[check.reason] += 1
    print(f"chain height {chain.height}, {args.trials} trials")
    print("detection offset:", dict(sorted(offsets.items(), key=str)))
    print("tampered field:  ", dict(fields.most_common()))
    print("first failure:   ", dict(reasons.most_common()))


if __name__ == "__main__":
    main()
