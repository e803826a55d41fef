"""Central finite-difference checks of the renderer's analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import render, render_backward
from .scene import PARAM_NAMES, CameraPose, GaussianMap, Intrinsics

CHANNELS = ("color", "depth", "silhouette", "semantic", "sem_silhouette")


@dataclass
class Partial:
    channel: str
    param: str
    index: tuple
    analytic: float
    numeric: float

    def ok(self, rtol: float = 1e-3, atol: float = 1e-6) -> bool:
        diff = abs(self.analytic - self.numeric)
        return diff <= max(rtol * max(abs(self.analytic), abs(self.numeric)), atol)

    def rel_error(self, atol: float = 1e-6) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), atol)


def _pose(rotation, translation) -> CameraPose:
    p = CameraPose.__new__(CameraPose)
    p.rotation = rotation
    p.translation = translation
    return p


def channel_partials(gmap: GaussianMap, pose: CameraPose, intr: Intrinsics, channel: str,
                     weights: np.ndarray, rel_step: float = 1e-4, pose_step: float = 1e-5) -> list[Partial]:
    """Compare every partial of ``sum(weights * channel)`` against central differences."""

    def objective(m, p):
        return float(np.sum(weights * getattr(render(m, p, intr, retain=False), channel)))

    out = render(gmap, pose, intr)
    grads = render_backward(out, **{f"d_{channel}": weights})
    res = []
    m = gmap.copy()
    for name in PARAM_NAMES:
        arr = getattr(m, name)
        ga = getattr(grads, name)
        for idx in np.ndindex(arr.shape):
            x0 = arr[idx]
            h = rel_step * max(abs(x0), 1e-2)
            arr[idx] = x0 + h
            lp = objective(m, pose)
            arr[idx] = x0 - h
            lm = objective(m, pose)
            arr[idx] = x0
            res.append(Partial(channel, name, idx, float(ga[idx]), (lp - lm) / (2 * h)))
    for name in ("rotation", "translation"):
        vec = getattr(pose, name)
        for i in range(len(vec)):
            vals = []
            for sgn in (1.0, -1.0):
                r = pose.rotation.copy()
                t = pose.translation.copy()
                (r if name == "rotation" else t)[i] += sgn * pose_step
                vals.append(objective(gmap, _pose(r, t)))
            res.append(Partial(channel, name, (i,), float(getattr(grads, name)[i]),
                               (vals[0] - vals[1]) / (2 * pose_step)))
    return res


def check_scene(gmap: GaussianMap, pose: CameraPose, intr: Intrinsics, rng) -> list[Partial]:
    """All partials of all five channels, each under a random linear functional."""
    H, W = intr.shape
    res = []
    for ch in CHANNELS:
        shape = (H, W, 3) if ch in ("color", "semantic") else (H, W)
        res.extend(channel_partials(gmap, pose, intr, ch, rng.normal(size=shape)))
    return res
