"""Best unilateral improvement of player 0 over a deviation family, across N and in the N = infinity limit.

    python scripts/nash_gap_sweep.py --N 8 16 32 64 --reps 2000
"""

import argparse

from rmfg.game_model import catalog_spec
from rmfg.nplayer_sim import OracleStrategy, calibrate_time_steps, nash_gap


def show(report):
    for row in report.rows:
        print(f"N={row.N:4d}  gap={row.gap:+.3e} +- {row.gap_stderr:.1e}  best={row.best_arm:14s} "
              f"eps_N={row.eps_N:.3f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--spec", default="lq-mean-drift")
    ap.add_argument("--N", nargs="+", type=int, default=[8, 16, 32, 64])
    ap.add_argument("--reps", type=int, default=2000)
    ap.add_argument("--n-t", type=int, default=0, help="0 picks the step count by calibration")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    spec = catalog_spec(args.spec)
    src = OracleStrategy(spec)
    n_t = args.n_t
    if n_t == 0:
        n_t, hist = calibrate_time_steps(spec, src, args.N[-1], min(args.reps, 400), args.seed)
        print("calibration", [(n, f"{d:+.2e}", f"{s:.1e}") for n, d, s in hist], "->", n_t)
    print("limit mode")
    show(nash_gap(spec, [2], src, reps=args.reps, n_t=n_t, seed=args.seed, infinite=True))
    print("finite N")
    rep = nash_gap(spec, args.N, src, reps=args.reps, n_t=n_t, seed=args.seed)
    show(rep)
    print(f"non-increasing within CI: {rep.non_increasing_within_ci()}  fitted constant {rep.fitted_constant:.3e}")


if __name__ == "__main__":
    main()
