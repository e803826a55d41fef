"""Lifting ablation on the noisy orbit: no lifting vs. lifting over 2 and 4 frames."""
import argparse
import sys

from panoslam.experiments import stl_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--windows", type=int, nargs="+", default=[2, 4])
    args = ap.parse_args()
    rows = stl_ablation(tuple(args.windows), args.frames, args.seed,
                        progress=lambda arm, rep: print(f"{arm}: frame {rep.index}", file=sys.stderr))
    print(f"{'arm':8s} {'mIoU':>7s} {'PQ':>7s} {'SQ':>7s} {'RQ':>7s} {'ATE cm':>7s}")
    for name, r in rows.items():
        print(f"{name:8s} {r.miou_percent:7.2f} {r.pq:7.2f} {r.sq:7.2f} {r.rq:7.2f} {r.ate_rmse_cm:7.3f}")


if __name__ == "__main__":
    main()
