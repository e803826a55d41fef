"""Command-line entry point: generate | slam | eval | render | ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
Progress goes to stderr; results only to files.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, SlamConfig, from_mapping
from .io import (DataFormatError, read_checkpoint, read_sequence, write_checkpoint, write_color,
                 write_depth, write_panoptic, write_report, write_sequence, _dump_yaml)
from .pipeline import SlamState, export_results, predict, process_frame, score
from .scene import CameraPose
from .synthetic import NoiseConfig, SceneSpec, TrajectorySpec, default_intrinsics, make_sequence

log = logging.getLogger("panoslam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class GenerateSpec:
    """Synthetic sequence recipe (YAML with sections scene, trajectory, noise, camera)."""
    scene: SceneSpec = field(default_factory=SceneSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    width: int = 64
    height: int = 64
    fov_degrees: float = 56.0

    @classmethod
    def load(cls, path) -> "GenerateSpec":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        spec = from_mapping(cls, data, "")
        spec.trajectory.target = tuple(spec.trajectory.target)
        return spec


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    spec = GenerateSpec.load(args.spec) if args.spec else GenerateSpec()
    if args.frames is not None:
        spec.trajectory.n_frames = args.frames
    noise = spec.noise
    if args.flip_rate is not None:
        noise = dataclasses.replace(noise, flip_rate=args.flip_rate)
    if args.permute:
        noise = dataclasses.replace(noise, permute_instances=True)
    if args.boundary is not None:
        noise = dataclasses.replace(noise, boundary_radius=args.boundary)
    noise = dataclasses.replace(noise, seed=args.seed)
    intr = default_intrinsics(spec.width, spec.height, spec.fov_degrees)
    log.info("generating %d frames (seed %d)", spec.trajectory.n_frames, args.seed)
    seq = make_sequence(spec.scene, spec.trajectory, noise, intr, seed=args.seed)
    write_sequence(args.out, seq.frames, intr, seq.gt_poses,
                   extra={"seed": args.seed, "noise": dataclasses.asdict(noise)})
    return EXIT_OK


def _load_config(args) -> SlamConfig:
    cfg = SlamConfig.load(args.config) if args.config else SlamConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    stl = cfg.stl
    if getattr(args, "no_stl", False):
        stl = dataclasses.replace(stl, enabled=False)
    if getattr(args, "stl_window", None) is not None:
        stl = dataclasses.replace(stl, window=args.stl_window)
    return dataclasses.replace(cfg, stl=stl)


def run_slam(seq, cfg: SlamConfig, out: Path, checkpoint_every: int = 0, resume=None, stop_after=None):
    state = read_checkpoint(resume) if resume else SlamState.create(cfg, seq.intrinsics)
    if resume and state.intr != seq.intrinsics:
        raise DataFormatError("checkpoint intrinsics do not match the sequence")
    out.mkdir(parents=True, exist_ok=True)
    end = len(seq.frames) if stop_after is None else min(stop_after, len(seq.frames))
    for frame in seq.frames[state.frame_count:end]:
        rep = process_frame(state, frame)
        log.info("frame %d: tracking %s, %d gaussians, mapping loss %.5f", rep.index, rep.tracking_status,
                 rep.n_gaussians, rep.mapping_loss)
        if checkpoint_every and state.frame_count % checkpoint_every == 0:
            write_checkpoint(out / f"checkpoint_{state.frame_count:06d}.ckpt", state)
    write_checkpoint(out / "final.ckpt", state)
    has_gt = any(f.gt_panoptic is not None for f in seq.frames)
    gt_poses = seq.poses[:state.frame_count] if seq.poses is not None else None
    report = export_results(state, out, seq.frames if has_gt else None, gt_poses)
    return state, report


def cmd_slam(args) -> int:
    cfg = _load_config(args)
    seq = read_sequence(args.sequence)
    if not seq.frames:
        raise DataFormatError(f"{args.sequence}: sequence has no frames")
    _, report = run_slam(seq, cfg, Path(args.out), args.checkpoint_every, args.resume, args.frames)
    if report is not None:
        log.info("ATE %.3f cm, depth L1 %.3f cm, PSNR %.2f dB, mIoU %.2f, PQ %.2f", report.ate_rmse_cm,
                 report.depth_l1_cm, report.psnr_db, report.miou_percent, report.pq)
    return EXIT_OK


def cmd_eval(args) -> int:
    res = read_sequence(args.results)
    gt = read_sequence(args.gt)
    if res.poses is None or gt.poses is None:
        raise DataFormatError("both results and ground truth need a trajectory")
    if len(res.poses) != len(gt.poses):
        raise DataFormatError(f"frame count mismatch: results have {len(res.poses)} poses, "
                              f"ground truth has {len(gt.poses)}")
    gt_frames = {f.index: f for f in gt.frames}
    missing = [f.index for f in res.frames if f.index not in gt_frames]
    if missing:
        raise DataFormatError(f"results reference frame {missing[0]} absent from ground truth")
    n_classes = args.classes
    preds = [(f.index, f.color, f.depth, f.gt_panoptic) for f in res.frames]
    report = score(preds, gt_frames, n_classes, res.poses, gt.poses)
    out = Path(args.out) if args.out else Path(args.results) / "report.yaml"
    write_report(out, report)
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_render(args) -> int:
    state = read_checkpoint(args.checkpoint)
    if args.pose is not None:
        vals = np.array(args.pose, dtype=np.float64)
        pose = CameraPose(vals[:4], vals[4:])
    else:
        k = args.frame if args.frame is not None else len(state.poses) - 1
        if not 0 <= k < len(state.poses):
            raise DataFormatError(f"frame {k} is outside the checkpoint trajectory (0..{len(state.poses) - 1})")
        pose = state.poses[k]
    pred = predict(state, pose)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_color(out / "color.png", np.clip(pred.color, 0, 1))
    write_depth(out / "depth.depth", pred.depth)
    write_panoptic(out / "panoptic.pan", pred.panoptic)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    seq = read_sequence(args.sequence)
    out = Path(args.out)
    rows = {}
    arms = [("no_stl", dataclasses.replace(cfg.stl, enabled=False))]
    arms += [(f"stl_{n}", dataclasses.replace(cfg.stl, enabled=True, window=n)) for n in args.windows]
    for name, stl in arms:
        log.info("ablation arm %s", name)
        _, report = run_slam(seq, dataclasses.replace(cfg, stl=stl), out / name, stop_after=args.frames)
        if report is None:
            raise DataFormatError("ablation needs ground-truth panoptic labels")
        rows[name] = {"miou": report.miou_percent, "pq": report.pq, "sq": report.sq, "rq": report.rq,
                      "ate_cm": report.ate_rmse_cm}
    (out / "ablation.yaml").write_text(_dump_yaml(rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="panoslam", description="Panoptic Gaussian-splatting RGB-D SLAM on synthetic rooms.")
    p.add_argument("--threads", type=int, default=None, help="cap on renderer worker threads")
    p.add_argument("-v", "--verbose", action="store_true", help="debug-level progress on stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("generate", help="write a synthetic RGB-D sequence with labels")
    g.add_argument("--out", required=True, help="output sequence directory")
    g.add_argument("--spec", help="YAML recipe with sections scene, trajectory, noise")
    g.add_argument("--seed", type=int, default=0, help="scene, trajectory and noise seed (default 0)")
    g.add_argument("--frames", type=int, help="override trajectory.n_frames")
    g.add_argument("--flip-rate", type=float, help="pseudo-label class flip probability")
    g.add_argument("--permute", action="store_true", help="shuffle pseudo region order per view")
    g.add_argument("--boundary", type=int, help="pseudo-label boundary jitter radius in pixels")
    g.set_defaults(func=cmd_generate)

    def slam_flags(sp):
        sp.add_argument("--config", help="YAML config; flags below override it")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--no-stl", action="store_true", help="disable spatial-temporal lifting")
        sp.add_argument("--stl-window", type=int, help="frames lifted together (STL-n)")
        sp.add_argument("--frames", type=int, help="process only the first N frames")

    s = sub.add_parser("slam", help="run SLAM over a sequence")
    s.add_argument("sequence", help="sequence directory")
    s.add_argument("--out", required=True, help="results directory")
    slam_flags(s)
    s.add_argument("--checkpoint-every", type=int, default=0, help="write a checkpoint every K frames")
    s.add_argument("--resume", help="continue from a checkpoint")
    s.set_defaults(func=cmd_slam)

    e = sub.add_parser("eval", help="score a results directory against ground truth")
    e.add_argument("results", help="results directory (from slam)")
    e.add_argument("gt", help="ground-truth sequence directory")
    e.add_argument("--out", help="report path (default RESULTS/report.yaml)")
    e.add_argument("--classes", type=int, default=16, help="number of semantic classes")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render color, depth and panoptic rasters from a checkpoint")
    r.add_argument("checkpoint", help="checkpoint file (from slam)")
    r.add_argument("--out", required=True, help="output directory")
    grp = r.add_mutually_exclusive_group()
    grp.add_argument("--frame", type=int, help="render from the estimated pose of this frame")
    grp.add_argument("--pose", type=float, nargs=7, metavar=("QW", "QX", "QY", "QZ", "TX", "TY", "TZ"),
                     help="world-to-camera pose")
    r.set_defaults(func=cmd_render)

    a = sub.add_parser("ablate", help="run the lifting ablation (off, and each window size)")
    a.add_argument("sequence", help="sequence directory with ground-truth labels")
    a.add_argument("--out", required=True, help="directory for one results folder per arm")
    slam_flags(a)
    a.add_argument("--windows", type=int, nargs="+", default=[2, 4], help="STL window sizes to compare")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"panoslam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:      # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    if args.threads is not None:
        if args.threads < 1:
            print("panoslam: error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        import numba

        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        return args.func(args)
    except (DataFormatError, ConfigError, FileNotFoundError) as exc:
        print(f"panoslam: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"panoslam: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
