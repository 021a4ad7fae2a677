"""Picard particle solver against the Riccati field on the LQ catalog, for a few budgets.

    python scripts/fbsde_vs_riccati.py --blocks 16 32 --particles 256 1024
"""

import argparse
import itertools
import time

import numpy as np

from rmfg.acceptance import fbsde_oracle_error
from rmfg.fbsde_solver import FbsdeBudget, bsde_residual, solve
from rmfg.game_model import catalog_spec
from rmfg.lq_oracle import solve_riccati


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--spec", nargs="+", default=["lq", "lq-mean-drift"])
    ap.add_argument("--blocks", nargs="+", type=int, default=[16, 32])
    ap.add_argument("--particles", nargs="+", type=int, default=[256, 1024])
    ap.add_argument("--n-steps", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print("spec            B     P   picard  sup_err    residual   seconds")
    for name in args.spec:
        spec = catalog_spec(name)
        sol = solve_riccati(spec.lq, spec.regimes, np.linspace(0.0, spec.horizon, 401))
        for B, P in itertools.product(args.blocks, args.particles):
            t0 = time.perf_counter()
            field, ens, rep = solve(spec, FbsdeBudget(blocks=B, particles=P, n_steps=args.n_steps), args.seed)
            err = fbsde_oracle_error(spec, field, ens, sol)
            res = bsde_residual(ens, spec, field)
            print(f"{name:14s} {B:3d} {P:5d} {rep.iterations:6d}  {err:.3e}  {res:.3e}  "
                  f"{time.perf_counter() - t0:7.1f}")


if __name__ == "__main__":
    main()
