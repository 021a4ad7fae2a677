"""Sup-in-time E[W2^2] between the N-player empirical law and the limit law, with a log-log fit.

    python scripts/chaos_sweep.py --N 8 16 32 64 128 256 --reps 200 --out chaos.csv
"""

import argparse

from rmfg.analysis import chaos_sweep, write_chaos_csv
from rmfg.game_model import catalog_spec
from rmfg.nplayer_sim import OracleStrategy


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--spec", default="lq-mean-drift")
    ap.add_argument("--N", nargs="+", type=int, default=[8, 16, 32, 64, 128])
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--n-t", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    spec = catalog_spec(args.spec)
    table = chaos_sweep(spec, OracleStrategy(spec), args.N, args.reps, args.n_t, args.seed)
    for r in table.rows:
        print(f"N={r.N:5d}  E[W2^2]={r.estimate:.4e} +- {r.stderr:.1e}  N*E={r.N * r.estimate:.4f}")
    lo, hi = table.slope_ci()
    print(f"slope {table.slope:.3f}  95% CI [{lo:.3f}, {hi:.3f}]  reference {table.reference_slope}")
    if args.out:
        write_chaos_csv(table, args.out)


if __name__ == "__main__":
    main()
