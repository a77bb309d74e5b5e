"""Compare the structured invariant-subspace algorithms with dense recursions.

Draws random modal systems, reports the worst projector distance and how many
cases needed the multiprecision referee.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import compare_with_oracle, random_modal_system  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cases", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-max", type=int, default=10)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    t0 = time.perf_counter()
    worst, refereed, bad = 0.0, 0, 0
    for case in range(args.cases):
        s = random_modal_system(rng, n_max=args.n_max)
        dW, dS, ref, cond, U = compare_with_oracle(s)
        worst = max(worst, dW, dS)
        refereed += ref
        if dW > 1e-8 or dS > 1e-8 or cond.iterations > cond.bound or not U.D.certified:
            bad += 1
            print(f"case {case}: dW={dW:.2e} dS={dS:.2e} it={cond.iterations}/{cond.bound}")
    print(f"{args.cases} cases, {bad} mismatches, {refereed} refereed, worst {worst:.2e}, "
          f"{time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
