"""Camera tracking against a frozen map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrackingConfig
from .optim import Adam
from .render import render, render_backward
from .scene import CameraPose, Frame, GaussianMap, Intrinsics, quat_normalize

_Q_MIN_NORM = 1e-6


def _quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                     w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                     w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2])


def init_pose_constant_velocity(prev: CameraPose, curr: CameraPose, mode: str = "additive") -> CameraPose:
    """Extrapolate one step of constant motion.

    ``additive`` applies ``2 * curr - prev`` to the translation and to the
    sign-aligned quaternion 4-vectors, then renormalizes.  ``relative``
    composes the last relative motion onto ``curr`` instead.
    """
    q_prev = prev.rotation.copy()
    q_curr = curr.rotation
    if q_prev @ q_curr < 0:
        q_prev = -q_prev
    if mode == "relative":
        delta = curr.matrix() @ prev.inverse_matrix()
        return CameraPose.from_matrix(delta @ curr.matrix())
    q = 2.0 * q_curr - q_prev
    if np.linalg.norm(q) < _Q_MIN_NORM:
        return curr.copy()
    return CameraPose(quat_normalize(q), 2.0 * curr.translation - prev.translation)


@dataclass
class TrackingResult:
    pose: CameraPose
    loss: float
    init_loss: float
    iterations: int
    degenerate: bool = False

    @property
    def status(self) -> str:
        return "degenerate" if self.degenerate else "ok"


def tracking_loss(out, frame: Frame, cfg: TrackingConfig, with_grad: bool = True):
    """Masked color + depth L1; returns ``(loss, n_pixels, d_color, d_depth)``."""
    mask = (out.silhouette > cfg.silhouette_threshold) & frame.valid
    n = int(mask.sum())
    if n == 0:
        return float("nan"), 0, None, None
    dc = out.color - frame.color
    dd = out.depth - frame.depth
    loss = (cfg.color_weight * np.abs(dc).sum(axis=2)[mask].sum()
            + cfg.depth_weight * np.abs(dd)[mask].sum()) / n
    if not with_grad:
        return float(loss), n, None, None
    m = mask.astype(np.float64) / n
    g_color = cfg.color_weight * np.sign(dc) * m[..., None]
    g_depth = cfg.depth_weight * np.sign(dd) * m
    return float(loss), n, g_color, g_depth


def track_frame(gmap: GaussianMap, frame: Frame, init: CameraPose, intr: Intrinsics,
                cfg: TrackingConfig | None = None) -> TrackingResult:
    """Refine ``init`` by gradient steps on the pose only; returns the best iterate seen."""
    cfg = cfg or TrackingConfig()
    if len(gmap) == 0:
        raise ValueError("cannot track against an empty map")
    params = {"rotation": init.rotation.copy(), "translation": init.translation.copy()}
    opt = Adam({"rotation": cfg.lr_rotation, "translation": cfg.lr_translation})
    best_pose, best_loss, init_loss = init.copy(), np.inf, None
    prev = None
    it = 0
    for it in range(cfg.iterations + 1):
        pose = CameraPose(params["rotation"], params["translation"])
        out = render(gmap, pose, intr, retain=True, semantic=False)
        last = it == cfg.iterations
        loss, n, gC, gD = tracking_loss(out, frame, cfg, with_grad=not last)
        if n == 0:
            if init_loss is None:
                return TrackingResult(init.copy(), float("nan"), float("nan"), 0, degenerate=True)
            break
        if init_loss is None:
            init_loss = loss
        if loss < best_loss:
            best_loss, best_pose = loss, pose
        if last or (cfg.tolerance > 0 and prev is not None and abs(prev - loss) < cfg.tolerance):
            break
        prev = loss
        g = render_backward(out, d_color=gC, d_depth=gD)
        opt.step(params, {"rotation": g.rotation, "translation": g.translation})
        params["rotation"] = quat_normalize(params["rotation"])
    return TrackingResult(best_pose, float(best_loss), float(init_loss), it)
