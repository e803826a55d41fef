"""Fraction of pixels in well-populated voxel groups whose lifted label is correct."""
import argparse

from panoslam.experiments import stl_denoising_rate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--flip-rate", type=float, default=0.3)
    ap.add_argument("--min-members", type=int, default=5)
    args = ap.parse_args()
    for s in args.seeds:
        rate, n = stl_denoising_rate(s, args.flip_rate, min_members=args.min_members)
        print(f"seed {s}: {100 * rate:.2f}% of {n} pixels")


if __name__ == "__main__":
    main()
