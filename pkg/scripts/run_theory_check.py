"""Sampler checks against analytic Gaussian targets, with corrupted-score controls."""
import argparse

from simdiff.theory import run_theory_checks


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--chains", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for res in run_theory_checks(args.chains, args.seed):
        print(f"{res.name:32s} W2 {res.w2:.4f}  mean {res.sample_mean:+.4f}  std {res.sample_std:.4f}  "
              f"{'pass' if res.passed else 'fail'} (threshold {res.threshold})")


if __name__ == "__main__":
    main()
