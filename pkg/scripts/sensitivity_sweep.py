"""Quantization sensitivity sweep: loss gap vs bit width, with the fitted log2 slope.

    python3 scripts/sensitivity_sweep.py --dim 32 --samples 100000 --out sens.csv
"""

import argparse
import time

from fwdtta.numerics import make_rng
from fwdtta.quant import sensitivity_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--samples", type=int, default=100_000)
    ap.add_argument("--models", type=int, default=2000)
    ap.add_argument("--bits", default="2,3,4,5,6,7,8")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()

    bits = [int(b) for b in args.bits.split(",")]
    t0 = time.perf_counter()
    report = sensitivity_experiment(args.dim, bits, args.samples, make_rng(args.seed), num_models=args.models)
    elapsed = time.perf_counter() - t0
    print(report.to_csv(args.out), end="")
    if min(bits) <= 3 and max(bits) >= 8:
        print(f"# log2 slope over n=3..8: {report.log2_slope(3, 8):.3f}")
    print(f"# {elapsed:.2f}s")


if __name__ == "__main__":
    main()
