"""Error of the in-VM SGD model against the least-squares solution, per epoch count."""
import argparse
import random

import numpy as np

from genie_sim import crypto, programs, vm


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--records", type=int, default=200)
    ap.add_argument("--rate", type=float, default=0.05)
    ap.add_argument("--noise", type=float, default=0.0)
    args = ap.parse_args()
    rng = random.Random(0)
    recs = []
    for _ in range(args.records):
        x = (rng.uniform(-1, 1), rng.uniform(-1, 1))
        recs.append((x, 2 * x[0] - x[1] + rng.gauss(0, args.noise)))
    X, y = np.array([r[0] for r in recs]), np.array([r[1] for r in recs])
    w_ls = np.linalg.lstsq(X, y, rcond=None)[0]
    prog = vm.assemble(programs.sgd_linreg(args.rate))
    for epochs in (1, 2, 5, 10, 20, 50):
        run = vm.run_training(prog, recs, epochs, crypto.Rng(1))
        err = np.max(np.abs(np.array(run.params["w"]) - w_ls))
        print(f"epochs={epochs:3d} w={tuple(round(v, 6) for v in run.params['w'])} max_err={err:.3e}")


if __name__ == "__main__":
    main()
