"""Reusable experiment drivers behind ``scripts/`` and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import SlamConfig
from .gradcheck import check_scene
from .metrics import EvalReport
from .pipeline import SlamState, evaluate, process_frame
from .scene import CameraPose, GaussianMap, Intrinsics, quat_normalize
from .stl import build_voxel_groups, refine_labels
from .synthetic import VOID, NoiseConfig, SyntheticSequence, TrajectorySpec, make_sequence


def random_gradcheck_scene(rng, n: int = 10, size: int = 16, pose_noise: float = 0.03):
    """``n`` Gaussians in front of a slightly perturbed camera, all landing inside the image."""
    c = (size - 1) / 2
    intr = Intrinsics(20.0, 20.0, c, c, size, size)
    z = rng.uniform(1.5, 3.0, n)
    uv = rng.uniform(2, size - 3, (n, 2))
    cam = np.column_stack([(uv - c) / 20.0 * z[:, None], z])
    gmap = GaussianMap(colors=rng.uniform(0, 1, (n, 3)), centers=cam,
                       radii=rng.uniform(1.0, 3.0, n) * z / 20.0, opacities=rng.uniform(0.1, 0.9, n),
                       semantics=rng.normal(size=(n, 3)), sem_radii=rng.uniform(1.0, 3.0, n) * z / 20.0,
                       sem_opacities=rng.uniform(0.1, 0.9, n))
    pose = CameraPose(quat_normalize(np.r_[1.0, rng.normal(scale=pose_noise, size=3)]),
                      rng.normal(scale=pose_noise, size=3))
    gmap.centers = pose.camera_to_world(cam)
    return gmap, pose, intr


@dataclass
class GradcheckSummary:
    n_scenes: int
    n_partials: int
    n_failed: int
    worst_rel_error: float
    seconds: float
    failures: list = field(default_factory=list)


def gradcheck_suite(n_scenes: int = 20, seed: int = 0, rtol: float = 1e-3, atol: float = 1e-6) -> GradcheckSummary:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    total, failed, worst = 0, [], 0.0
    for _ in range(n_scenes):
        gmap, pose, intr = random_gradcheck_scene(rng)
        for p in check_scene(gmap, pose, intr, rng):
            total += 1
            worst = max(worst, p.rel_error(atol))
            if not p.ok(rtol, atol):
                failed.append(p)
    return GradcheckSummary(n_scenes, total, len(failed), worst, time.perf_counter() - t0, failed[:20])


def stl_denoising_rate(seed: int = 0, flip_rate: float = 0.3, n_frames: int = 4, voxel_size: float = 0.05,
                       min_members: int = 5) -> tuple[float, int]:
    """Fraction of members of big voxel groups whose refined argmax is their true region.

    True regions are the ground-truth segments of a short synthetic orbit.
    Every labeled pixel of every view independently swaps its region for a
    uniformly drawn other one with probability ``flip_rate``.
    """
    seq = make_sequence(traj_spec=TrajectorySpec(n_frames=n_frames, arc_degrees=4.0), seed=seed)
    gts = [f.gt_panoptic for f in seq.frames]
    segs = np.unique(np.concatenate([g[g != VOID] for g in gts]))
    M = len(segs)
    rng = np.random.default_rng(seed)
    truth, regions = [], []
    for g in gts:
        lab = np.where(g != VOID, np.searchsorted(segs, g), -1)
        flip = (rng.uniform(size=g.shape) < flip_rate) & (lab >= 0)
        other = (lab + rng.integers(1, M, size=g.shape)) % M
        noisy = np.where(flip, other, lab)
        r = np.zeros(g.shape + (M,))
        ys, xs = np.nonzero(noisy >= 0)
        r[ys, xs, noisy[ys, xs]] = 1.0
        truth.append(lab.ravel())
        regions.append(r)
    depths = [np.where(g != VOID, f.depth, 0.0) for g, f in zip(gts, seq.frames)]
    groups = build_voxel_groups(depths, seq.gt_poses, seq.intrinsics, voxel_size)
    refined, _ = refine_labels(groups, regions)
    big = groups.sizes()[groups.group] >= min_members
    hits = [refined[t].reshape(-1, M)[p].argmax() == truth[t][p]
            for t, p in zip(groups.frame[big], groups.pixel[big])]
    return (float(np.mean(hits)) if hits else float("nan")), len(hits)


@dataclass
class SlamRun:
    state: SlamState
    report: EvalReport
    seconds: float
    sequence: SyntheticSequence


def synthetic_sequence(n_frames: int = 50, noise: Optional[NoiseConfig] = None, seed: int = 0) -> SyntheticSequence:
    return make_sequence(traj_spec=TrajectorySpec(n_frames=n_frames), noise=noise, seed=seed)


def run_synthetic_slam(config: Optional[SlamConfig] = None, n_frames: int = 50,
                       noise: Optional[NoiseConfig] = None, seed: int = 0,
                       sequence: Optional[SyntheticSequence] = None,
                       progress: Optional[Callable] = None) -> SlamRun:
    """Run the full pipeline on the synthetic orbit and score it against ground truth."""
    seq = sequence or synthetic_sequence(n_frames, noise, seed)
    state = SlamState.create(config or SlamConfig(), seq.intrinsics)
    t0 = time.perf_counter()
    for frame in seq.frames[:n_frames]:
        rep = process_frame(state, frame)
        if progress is not None:
            progress(rep)
    seconds = time.perf_counter() - t0
    return SlamRun(state, evaluate(state, seq.frames, seq.gt_poses[:n_frames]), seconds, seq)


def ablation_noise(seed: int = 0) -> NoiseConfig:
    return NoiseConfig(flip_rate=0.3, permute_instances=True, boundary_radius=1, seed=seed)


def stl_ablation(windows=(2, 4), n_frames: int = 50, seed: int = 0, base: Optional[SlamConfig] = None,
                 progress: Optional[Callable] = None) -> dict[str, EvalReport]:
    """The same noisy sequence without lifting and with lifting over each window size."""
    base = base or SlamConfig()
    seq = synthetic_sequence(n_frames, ablation_noise(seed), seed)
    arms = {"no_stl": base.replace(stl=type(base.stl)(enabled=False, voxel_size=base.stl.voxel_size))}
    for w in windows:
        arms[f"stl_{w}"] = base.replace(stl=type(base.stl)(enabled=True, window=w, voxel_size=base.stl.voxel_size))
    out = {}
    for name, cfg in arms.items():
        out[name] = run_synthetic_slam(cfg, n_frames, seed=seed, sequence=seq,
                                       progress=(lambda r, n=name: progress(n, r)) if progress else None).report
    return out
