"""Per-frame SLAM loop: tracking, densification, label lifting and mapping."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .config import SlamConfig
from .mapping import (Keyframe, WindowItem, align_pseudo_labels, densification_mask, densify,
                      map_update_step, new_optimizer, select_keyframes)
from .metrics import Confusion, EvalReport, PQStat, ate_rmse, depth_l1, psnr, semantic_from_panoptic, ssim
from .panoptic import PanopticHead, classify_regions, panoptic_inference, region_logits
from .render import render
from .scene import CameraPose, Frame, GaussianMap, Intrinsics, init_map_from_first_frame
from .stl import build_voxel_groups, refine_labels
from .tracking import init_pose_constant_velocity, track_frame

log = logging.getLogger(__name__)


@dataclass
class FrameReport:
    index: int
    tracking_status: str = "none"
    tracking_loss: float = 0.0
    tracking_iterations: int = 0
    n_new: int = 0
    n_gaussians: int = 0
    window: list = field(default_factory=list)
    mapping_iterations: int = 0
    mapping_loss: float = 0.0
    mapping_rejected: int = 0
    mapping_no_match: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SlamState:
    config: SlamConfig
    intr: Intrinsics
    gmap: GaussianMap
    head: PanopticHead
    poses: list = field(default_factory=list)
    keyframes: list = field(default_factory=list)
    frame_count: int = 0
    log: list = field(default_factory=list)

    @classmethod
    def create(cls, config: SlamConfig, intr: Intrinsics) -> "SlamState":
        h = config.head
        head = PanopticHead.create(h.n_regions, h.n_classes, h.hidden, h.null_class, seed=config.seed)
        return cls(config, intr, GaussianMap(), head)


def _window_items(state: SlamState, frames_poses, stl_on: bool) -> list[WindowItem]:
    """Slot-aligned (and optionally lifted) panoptic targets for each window frame."""
    cfg = state.config
    items = []
    for frame, pose in frames_poses:
        if frame.has_labels:
            out = render(state.gmap, pose, state.intr, retain=False)
            regions, classes = align_pseudo_labels(state.head, out.semantic, frame, cfg.mapping)
            items.append(WindowItem(frame, pose, regions, classes))
        else:
            items.append(WindowItem(frame, pose))
    n = min(cfg.stl.window, len(items))
    lab = [i for i in range(n) if items[i].regions is not None]
    if stl_on and len(lab) > 0:
        groups = build_voxel_groups([items[i].frame.depth for i in lab], [items[i].pose for i in lab],
                                    state.intr, cfg.stl.voxel_size)
        regions, classes = refine_labels(groups, [items[i].regions for i in lab],
                                         [items[i].classes for i in lab])
        for j, i in enumerate(lab):
            items[i].regions, items[i].classes = regions[j], classes[j]
    return items


def _map(state: SlamState, items: list[WindowItem], t: int, report: FrameReport) -> None:
    mc = state.config.mapping
    warm = t < mc.warmup_frames
    iters = mc.warmup_iterations if warm else mc.iterations
    panoptic = mc.panoptic_in_warmup or not warm
    opt = new_optimizer(mc)
    for _ in range(iters):
        res = map_update_step(state.gmap, state.head, items, state.intr, mc, opt, panoptic)
        report.mapping_loss = res.loss
        report.mapping_rejected += res.status == "rejected"
        report.mapping_no_match += res.status == "no_match"
    report.mapping_iterations = iters


def process_frame(state: SlamState, frame: Frame) -> FrameReport:
    """Advance the state by one frame (in temporal order)."""
    cfg = state.config
    t = state.frame_count
    report = FrameReport(index=t)
    if t == 0:
        state.gmap = init_map_from_first_frame(frame, state.intr)
        pose = CameraPose.identity()
        report.n_new = len(state.gmap)
        window = []
    else:
        prev = state.poses[-2] if t >= 2 else state.poses[-1]
        init = init_pose_constant_velocity(prev, state.poses[-1], cfg.tracking.velocity)
        tr = track_frame(state.gmap, frame, init, state.intr, cfg.tracking)
        pose = tr.pose
        report.tracking_status = tr.status
        report.tracking_loss = tr.loss
        report.tracking_iterations = tr.iterations
        if tr.degenerate:
            log.warning("frame %d: no pixel passed the silhouette mask; keeping the initial pose", t)
        out = render(state.gmap, pose, state.intr, retain=False)
        mask = densification_mask(out, frame, cfg.mapping)
        before = len(state.gmap)
        state.gmap = densify(state.gmap, frame, mask, pose, state.intr)
        report.n_new = len(state.gmap) - before
        window = select_keyframes(frame, pose, state.keyframes, state.intr, cfg.mapping.window,
                                  cfg.mapping.keyframe_points, seed=cfg.seed * 100003 + t)
    state.poses.append(pose.copy())
    frames_poses = [(frame, pose)] + [(kf.frame, kf.pose) for kf in window]
    report.window = [t] + [kf.index for kf in window]
    items = _window_items(state, frames_poses, cfg.stl.enabled)
    _map(state, items, t, report)
    if t % cfg.mapping.keyframe_interval == 0:
        state.keyframes.append(Keyframe(t, pose.copy(), frame))
    state.frame_count += 1
    report.n_gaussians = len(state.gmap)
    state.log.append(report.to_dict())
    return report


def run(state: SlamState, frames: Iterable[Frame], progress=None) -> SlamState:
    for frame in frames:
        rep = process_frame(state, frame)
        if progress is not None:
            progress(rep)
    return state


# --------------------------------------------------------------------------
# prediction and evaluation
# --------------------------------------------------------------------------

@dataclass
class Prediction:
    color: np.ndarray
    depth: np.ndarray
    panoptic: np.ndarray     # uint32 ids
    semantic: np.ndarray     # int class, -1 void


def predict(state: SlamState, pose: CameraPose) -> Prediction:
    out = render(state.gmap, pose, state.intr, retain=False)
    h = state.config.head
    seg = panoptic_inference(region_logits(out.semantic, state.head), classify_regions(state.head),
                             n_classes=state.head.n_classes, class_threshold=h.class_threshold,
                             keep_frac=h.keep_frac)
    return Prediction(out.color, out.depth, seg.panoptic_ids(), seg.semantic())


def score(preds, gt_frames: dict, n_classes: int, est_poses=None, gt_poses=None,
          extra: Optional[dict] = None) -> EvalReport:
    """Metrics for ``(index, color, depth, panoptic ids)`` predictions against ``gt_frames[index]``."""
    conf = Confusion(n_classes)
    pq = PQStat()
    dl, ps, ss = [], [], []
    for index, color, depth, pan in preds:
        gt = gt_frames[index]
        color = np.clip(color, 0, 1)
        dl.append(depth_l1(depth, gt.depth))
        ps.append(psnr(color, gt.color))
        ss.append(ssim(color, gt.color))
        if gt.gt_panoptic is not None and pan is not None:
            conf.add(semantic_from_panoptic(pan), semantic_from_panoptic(gt.gt_panoptic))
            pq.add(pan, gt.gt_panoptic)
    ate = float("nan")
    if est_poses is not None and gt_poses is not None and len(gt_poses) >= 2:
        ate = ate_rmse(est_poses, gt_poses)
    p, s, r = pq.summary()
    mean = (lambda xs: float(np.mean(xs)) if xs else float("nan"))
    return EvalReport(
        ate_rmse_cm=ate, depth_l1_cm=mean(dl), psnr_db=mean(ps), ssim=mean(ss),
        miou_percent=conf.miou(), pq=p, sq=s, rq=r,
        n_frames=len(est_poses) if est_poses is not None else 0, n_keyframes=len(preds),
        per_class_pq=pq.per_class(), extra=extra or {})


def keyframe_predictions(state: SlamState) -> list:
    out = []
    for kf in state.keyframes:
        p = predict(state, kf.pose)
        out.append((kf.index, p.color, p.depth, p.panoptic))
    return out


def evaluate(state: SlamState, gt_frames: list[Frame], gt_poses: Optional[list] = None) -> EvalReport:
    """Score keyframe renders against ground truth and the trajectory against ``gt_poses``."""
    gt = {f.index: f for f in gt_frames}
    extra = {"n_gaussians": len(state.gmap), "stl": state.config.stl.enabled,
             "stl_window": state.config.stl.window, "seed": state.config.seed}
    return score(keyframe_predictions(state), gt, state.head.n_classes, state.poses, gt_poses, extra)


def export_results(state: SlamState, out_dir, gt_frames: Optional[list] = None,
                   gt_poses: Optional[list] = None) -> Optional[EvalReport]:
    """Write keyframe renders, the trajectory, the frame log and (with ground truth) a report."""
    from . import io

    if state.frame_count == 0:
        raise ValueError("nothing to export before the first frame")
    root = Path(out_dir)
    preds = keyframe_predictions(state)
    frames = [Frame(np.clip(c, 0, 1), d, i, gt_panoptic=p) for i, c, d, p in preds]
    io.write_sequence(root, frames, state.intr, state.poses, kind="results",
                      indices=[i for i, *_ in preds], poses_name="trajectory.txt")
    state.config.save(root / "config.yaml")
    (root / "log.yaml").write_text(io._dump_yaml(state.log))
    report = None
    if gt_frames is not None:
        extra = {"n_gaussians": len(state.gmap), "stl": state.config.stl.enabled,
                 "stl_window": state.config.stl.window, "seed": state.config.seed}
        report = score(preds, {f.index: f for f in gt_frames}, state.head.n_classes,
                       state.poses, gt_poses, extra)
        io.write_report(root / "report.yaml", report)
    return report
