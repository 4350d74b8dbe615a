"""Distribution of the moment-check spread over many seeds.

Used to pick the default ``threshold`` of :func:`stablewalk.decomp.moment_check`.

    python3 scripts/pilot_moment_check.py --seeds 150
"""

import argparse
from pathlib import Path

import numpy as np

from stablewalk.chain import load_model
from stablewalk.decomp import moment_check, solve_poisson

MODELS = Path(__file__).resolve().parents[1] / "configs" / "models"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=150)
    ap.add_argument("--models", nargs="+", default=["symmetric", "skewed", "markov"])
    args = ap.parse_args()
    for name in args.models:
        model = load_model(MODELS / f"{name}.json")
        sol = solve_poisson(model)
        spread = np.array([moment_check(sol, model, seed=s).spread for s in range(args.seeds)])
        q50, q99 = np.quantile(spread, [0.5, 0.99])
        print(f"{name:10s} median {q50:.3f}  q99 {q99:.3f}  max {spread.max():.3f}  above 1.5: {np.sum(spread >= 1.5)}")


if __name__ == "__main__":
    main()
