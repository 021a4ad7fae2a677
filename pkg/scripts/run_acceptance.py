"""Run the exit criteria directly and print one verdict line each.

    python scripts/run_acceptance.py              # every criterion
    python scripts/run_acceptance.py 3 4 --seed 7
"""

import argparse

from rmfg.acceptance import CRITERIA, run_criterion

SEEDLESS = {4}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("criteria", nargs="*", type=int, default=sorted(CRITERIA))
    ap.add_argument("--seed", type=int, default=20240601)
    args = ap.parse_args()
    failed = 0
    for k in args.criteria:
        res = run_criterion(k) if k in SEEDLESS else run_criterion(k, seed=args.seed)
        print(res.line(), flush=True)
        failed += not res.passed
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()
