"""Finite-difference check of every renderer partial on random small scenes."""
import argparse

from panoslam.experiments import gradcheck_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenes", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rtol", type=float, default=1e-3)
    ap.add_argument("--atol", type=float, default=1e-6)
    args = ap.parse_args()
    s = gradcheck_suite(args.scenes, args.seed, args.rtol, args.atol)
    print(f"{s.n_partials} partials, {s.n_failed} failed, worst relative error {s.worst_rel_error:.3e}, "
          f"{s.seconds:.1f} s")
    for p in s.failures:
        print(f"  {p.channel} d/d{p.param}{list(p.index)}: analytic {p.analytic:.6e} numeric {p.numeric:.6e}")
    return 1 if s.n_failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
