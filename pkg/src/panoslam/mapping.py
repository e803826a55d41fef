"""Map optimization: densification, keyframe windows and the joint update step."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import MappingConfig
from .optim import Adam
from .panoptic import (HeadGradients, PanopticHead, class_logits_backward, classify_regions,
                       decode, dice_loss, hungarian_match, region_logits_backward,
                       sigmoid_focal_loss, soft_cross_entropy)
from .render import NEAR, RenderOutput, render, render_backward
from .scene import CameraPose, Frame, GaussianMap, Intrinsics, backproject, gaussians_from_pixels


@dataclass
class Keyframe:
    index: int
    pose: CameraPose
    frame: Frame


@dataclass
class WindowItem:
    """One frame of the optimization window with slot-aligned panoptic targets."""
    frame: Frame
    pose: CameraPose
    regions: Optional[np.ndarray] = None   # (H, W, N) distribution over head regions
    classes: Optional[np.ndarray] = None   # (N, K)


@dataclass
class LossTerms:
    color: float = 0.0
    depth: float = 0.0
    ce: float = 0.0
    dice: float = 0.0
    focal: float = 0.0
    total: float = 0.0
    matched: int = 0

    def scaled(self, s: float) -> "LossTerms":
        return LossTerms(self.color * s, self.depth * s, self.ce * s, self.dice * s, self.focal * s,
                         self.total * s, self.matched)

    def __add__(self, o: "LossTerms") -> "LossTerms":
        return LossTerms(self.color + o.color, self.depth + o.depth, self.ce + o.ce, self.dice + o.dice,
                         self.focal + o.focal, self.total + o.total, self.matched + o.matched)


@dataclass
class StepResult:
    loss: float
    terms: LossTerms
    status: str = "ok"    # ok | no_match | rejected


# --------------------------------------------------------------------------
# densification
# --------------------------------------------------------------------------

def densification_mask(out: RenderOutput, frame: Frame, cfg: MappingConfig | None = None) -> np.ndarray:
    cfg = cfg or MappingConfig()
    valid = frame.valid
    thr = cfg.densify_silhouette
    mask = (out.silhouette < thr) | (out.sem_silhouette < thr)
    err = np.abs(out.depth - frame.depth)
    if valid.any():
        mask |= valid & (err > cfg.depth_error_factor * np.median(err[valid]))
    return mask


def densify(gmap: GaussianMap, frame: Frame, mask: np.ndarray, pose: CameraPose,
            intr: Intrinsics) -> GaussianMap:
    out = gmap.copy()
    out.extend(gaussians_from_pixels(frame, mask, pose, intr))
    return out


# --------------------------------------------------------------------------
# keyframes
# --------------------------------------------------------------------------

def frustum_count(points_world: np.ndarray, pose: CameraPose, intr: Intrinsics) -> int:
    cam = pose.world_to_camera(points_world)
    z = cam[:, 2]
    front = z > NEAR
    zs = np.where(front, z, 1.0)
    u = intr.fx * cam[:, 0] / zs + intr.cx
    v = intr.fy * cam[:, 1] / zs + intr.cy
    inside = front & (u >= -0.5) & (u < intr.width - 0.5) & (v >= -0.5) & (v < intr.height - 0.5)
    return int(inside.sum())


def sample_frame_points(frame: Frame, pose: CameraPose, intr: Intrinsics, max_points: int = 4096,
                        seed: int = 0) -> np.ndarray:
    v, u = np.nonzero(frame.valid)
    if len(u) > max_points:
        pick = np.sort(np.random.default_rng(seed).choice(len(u), max_points, replace=False))
        v, u = v[pick], u[pick]
    return pose.camera_to_world(backproject(u.astype(np.float64), v.astype(np.float64),
                                            frame.depth[v, u], intr))


def select_keyframes(frame: Frame, pose: CameraPose, keyframes: list[Keyframe], intr: Intrinsics,
                     window: int, max_points: int = 4096, seed: int = 0) -> list[Keyframe]:
    """Up to ``window - 1`` keyframes seeing most of the current frame's points.

    Keyframes with no overlap are never chosen; ties go to the most recent.
    The caller appends the current frame to complete the window.
    """
    if window <= 1 or not keyframes:
        return []
    pts = sample_frame_points(frame, pose, intr, max_points, seed)
    scored = [(frustum_count(pts, kf.pose, intr), kf.index, i) for i, kf in enumerate(keyframes)]
    scored = [s for s in scored if s[0] > 0]
    scored.sort(key=lambda s: (-s[0], -s[1]))
    return [keyframes[i] for _, _, i in scored[:window - 1]]


# --------------------------------------------------------------------------
# panoptic targets
# --------------------------------------------------------------------------

def align_pseudo_labels(head: PanopticHead, semantic: np.ndarray, frame: Frame,
                        cfg: MappingConfig | None = None):
    """Map the frame's pseudo regions onto head regions by minimum-cost matching.

    Returns ``(regions (H, W, N), classes (N, K))``; pseudo regions left
    unmatched (more pseudo regions than head regions) become unlabeled.
    """
    cfg = cfg or MappingConfig()
    H, W = frame.shape
    N, K = head.n_regions, head.n_classes
    out_r = np.zeros((H, W, N))
    out_c = np.zeros((N, K))
    if not frame.has_labels:
        return out_r, out_c
    pr = frame.pseudo_regions.reshape(H * W, -1)
    lab = pr.sum(axis=1) > 0
    present = np.nonzero(pr[lab].sum(axis=0) > 0)[0]
    if len(present) == 0:
        return out_r, out_c
    S = np.asarray(semantic, dtype=np.float64).reshape(-1, 3)[lab]
    logits = (decode(head, S) @ head.regions.T).T
    rows, cols = hungarian_match(logits, pr[lab][:, present].T, classify_regions(head),
                                 frame.pseudo_classes[present][:, :K],
                                 cfg.class_weight, cfg.dice_weight, cfg.focal_weight)
    flat = out_r.reshape(H * W, N)
    flat[:, rows] = pr[:, present[cols]]
    out_c[rows] = frame.pseudo_classes[present[cols]][:, :K]
    return out_r, out_c


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def photometric_loss(out: RenderOutput, frame: Frame, cfg: MappingConfig):
    """Color L1 (channel sum, pixel mean) and depth L1 (mean over valid pixels), with gradients."""
    P = frame.depth.size
    dc = out.color - frame.color
    color = np.abs(dc).sum() / P
    g_color = cfg.color_weight * np.sign(dc) / P
    valid = frame.valid
    nv = int(valid.sum())
    dd = out.depth - frame.depth
    if nv:
        depth = np.abs(dd)[valid].sum() / nv
        g_depth = cfg.depth_weight * np.sign(dd) * valid / nv
    else:
        depth, g_depth = 0.0, np.zeros_like(dd)
    return float(color), float(depth), g_color, g_depth


def panoptic_loss(semantic: np.ndarray, regions: np.ndarray, classes: np.ndarray, head: PanopticHead,
                  cfg: MappingConfig, grads: Optional[HeadGradients] = None):
    """CE + dice + focal against slot-aligned targets.

    Regions that are the target argmax on at least one pixel count as
    matched.  Dice runs over matched regions, focal over all regions (empty
    target for unmatched ones); both are normalized by the matched count.
    The class term also pushes regions
    that win pixels in the prediction but have no target toward no-object.
    Returns ``(ce, dice, focal, n_matched, dL/dS)``; head gradients are
    accumulated into ``grads`` when given.
    """
    H, W, N = regions.shape
    tgt = regions.reshape(H * W, N)
    # NaN rows count as labeled so corrupt targets surface as a non-finite loss
    lab = np.nonzero(~(tgt.sum(axis=1) == 0))[0]
    dS = np.zeros((H * W, 3))
    if len(lab) == 0:
        return 0.0, 0.0, 0.0, 0, dS.reshape(H, W, 3)
    t = tgt[lab]
    S = np.asarray(semantic, dtype=np.float64).reshape(-1, 3)[lab]
    logits = decode(head, S) @ head.regions.T
    matched = np.zeros(N, dtype=bool)
    matched[np.unique(t.argmax(axis=1))] = True
    mi = np.nonzero(matched)[0]
    nm = len(mi)
    # focal covers every region (unmatched ones against an empty mask) so that
    # unsupervised regions cannot win the per-pixel softmax at inference
    f_per, f_grad = sigmoid_focal_loss(logits.T, t.T)
    d_per, d_grad = dice_loss(logits[:, mi].T, t[:, mi].T)
    focal = float(f_per.sum() / nm)
    dice = float(d_per.sum() / nm)

    K = head.n_classes
    C = head.classifier.shape[1]
    zlog = head.regions @ head.classifier
    q = np.zeros((N, C))
    w = np.zeros(N)
    q[mi, :K] = classes[mi]
    w[mi] = 1.0
    if head.null_class:
        present = np.zeros(N, dtype=bool)
        present[np.unique(logits.argmax(axis=1))] = True
        empty = present & ~matched
        q[empty, K] = 1.0
        w[empty] = cfg.no_object_weight
    ce, g_z = soft_cross_entropy(zlog, q, w)

    if grads is not None:
        d_logits = np.zeros_like(logits)
        d_logits[:] = cfg.focal_weight * f_grad.T / nm
        d_logits[:, mi] += cfg.dice_weight * d_grad.T / nm
        dS[lab] = region_logits_backward(head, S, d_logits, grads)
        class_logits_backward(head, cfg.class_weight * g_z, grads)
    return ce, dice, focal, nm, dS.reshape(H, W, 3)


def frame_loss(out: RenderOutput, item: WindowItem, head: PanopticHead, cfg: MappingConfig,
               panoptic: bool = True, grads: Optional[HeadGradients] = None):
    """Loss terms for one window frame; returns ``(terms, upstream render grads or None)``."""
    color, depth, gC, gD = photometric_loss(out, item.frame, cfg)
    terms = LossTerms(color, depth)
    gS = None
    if panoptic and item.regions is not None and item.classes is not None:
        ce, dice, focal, nm, gS = panoptic_loss(out.semantic, item.regions, item.classes, head, cfg, grads)
        terms.ce, terms.dice, terms.focal, terms.matched = ce, dice, focal, nm
    terms.total = (cfg.color_weight * terms.color + cfg.depth_weight * terms.depth
                   + cfg.class_weight * terms.ce + cfg.dice_weight * terms.dice
                   + cfg.focal_weight * terms.focal)
    return terms, (gC, gD, gS)


def total_loss(gmap: GaussianMap, head: PanopticHead, window: list[WindowItem], intr: Intrinsics,
               cfg: MappingConfig | None = None, panoptic: bool = True) -> LossTerms:
    """Window-averaged five-term objective (value only)."""
    cfg = cfg or MappingConfig()
    acc = LossTerms()
    for item in window:
        out = render(gmap, item.pose, intr, retain=False)
        terms, _ = frame_loss(out, item, head, cfg, panoptic)
        acc = acc + terms
    return acc.scaled(1.0 / len(window))


def loss_and_grads(gmap: GaussianMap, head: PanopticHead, window: list[WindowItem], intr: Intrinsics,
                   cfg: MappingConfig, panoptic: bool = True):
    """Objective plus gradients for every map and head parameter."""
    T = len(window)
    g_map = {k: np.zeros_like(v) for k, v in gmap.params().items()}
    g_head = HeadGradients.zeros_like(head)
    acc = LossTerms()
    for item in window:
        out = render(gmap, item.pose, intr, retain=True)
        terms, (gC, gD, gS) = frame_loss(out, item, head, cfg, panoptic, g_head)
        acc = acc + terms
        rg = render_backward(out, d_color=gC, d_depth=gD, d_semantic=gS)
        for k, v in rg.params().items():
            g_map[k] += v
    for v in g_map.values():
        v /= T
    for v in g_head.params().values():
        v /= T
    return acc.scaled(1.0 / T), g_map, g_head


def new_optimizer(cfg: MappingConfig) -> Adam:
    return Adam(cfg.learning_rates(), log_domain=("radii", "sem_radii"),
                logit_domain=("opacities", "sem_opacities"))


def map_update_step(gmap: GaussianMap, head: PanopticHead, window: list[WindowItem], intr: Intrinsics,
                    cfg: MappingConfig, opt: Adam, panoptic: bool = True) -> StepResult:
    """One in-place optimizer step on every Gaussian and head parameter; poses stay fixed."""
    terms, g_map, g_head = loss_and_grads(gmap, head, window, intr, cfg, panoptic)
    finite = np.isfinite(terms.total) and all(np.all(np.isfinite(v)) for v in g_map.values()) \
        and all(np.all(np.isfinite(v)) for v in g_head.params().values())
    if not finite:
        opt.scale_lr(0.5)
        return StepResult(float(terms.total), terms, "rejected")
    params = dict(gmap.params())
    params.update(head.params())
    grads = dict(g_map)
    grads.update(g_head.params())
    opt.step(params, grads)
    gmap.clamp_()
    has_targets = any(it.regions is not None for it in window)
    status = "no_match" if panoptic and has_targets and terms.matched == 0 else "ok"
    return StepResult(float(terms.total), terms, status)
