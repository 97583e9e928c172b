"""Sweep K (neighbors), J (codebook size) or L (layers) on the synthetic data.

    python scripts/sweep.py --axis J --values 4 8 16 32 --out artifacts/sweeps
"""

import argparse

from dqrec.cli import setup_logging
from dqrec.config import synthetic_config
from dqrec.pipeline import sweep


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--axis", choices=("K", "J", "L"), required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="artifacts/sweeps")
    args = p.parse_args()
    setup_logging(0)
    for row in sweep(synthetic_config(seed=args.seed), args.axis, args.values, f"{args.out}/seed{args.seed}"):
        recall = row.get("recall@5", "")
        print(f"{args.axis}={row['value']:>4} {row['status']:>6} recall@5={recall} "
              f"q_err(user)={row.get('quant_error_user', '')} {row['error']}")


if __name__ == "__main__":
    main()
