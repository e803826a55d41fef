"""Spatial-temporal lifting of per-view pseudo labels.

Pixels of a window of frames are lifted to world points with their sensor
depth, grouped by voxel, and every member of a voxel receives the mean region
distribution of its group.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CameraPose, Intrinsics, backproject


class InvalidDepthError(ValueError):
    pass


def unproject(pixel, depth: float, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """World point seen at ``pixel = (u, v)`` with ``depth`` meters along the optical axis."""
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    u, v = pixel
    return pose.camera_to_world(backproject(np.float64(u), np.float64(v), np.float64(depth), intr))


@dataclass
class VoxelGroups:
    """Flat membership table: entry q is pixel ``pixel[q]`` of window frame ``frame[q]``.

    Entries are sorted by group; group g spans ``offsets[g]:offsets[g + 1]``
    and owns voxel index ``keys[g]``.
    """
    voxel_size: float
    keys: np.ndarray       # (G, 3) int64
    offsets: np.ndarray    # (G + 1,)
    frame: np.ndarray      # (Q,) window position
    pixel: np.ndarray      # (Q,) flat pixel index
    group: np.ndarray      # (Q,) group id

    def __len__(self) -> int:
        return len(self.keys)

    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def members(self, g: int) -> list[tuple[int, int]]:
        s, e = self.offsets[g], self.offsets[g + 1]
        return list(zip(self.frame[s:e].tolist(), self.pixel[s:e].tolist()))


def voxel_index(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """``floor(p / S)`` per axis; an infinite size maps everything to voxel (0, 0, 0)."""
    if np.isinf(voxel_size):
        return np.zeros((len(points), 3), dtype=np.int64)
    return np.floor(points / voxel_size).astype(np.int64)


def build_voxel_groups(depths, poses, intr: Intrinsics, voxel_size: float) -> VoxelGroups:
    """Group every valid-depth pixel of the window by the voxel its world point falls in."""
    us, vs = np.meshgrid(np.arange(intr.width, dtype=np.float64), np.arange(intr.height, dtype=np.float64))
    fr, px, pts = [], [], []
    for t, (d, pose) in enumerate(zip(depths, poses)):
        d = np.asarray(d, dtype=np.float64)
        valid = (d > 0).ravel()
        idx = np.nonzero(valid)[0]
        cam = backproject(us.ravel()[idx], vs.ravel()[idx], d.ravel()[idx], intr)
        pts.append(pose.camera_to_world(cam))
        fr.append(np.full(len(idx), t, dtype=np.int64))
        px.append(idx.astype(np.int64))
    frame = np.concatenate(fr) if fr else np.zeros(0, dtype=np.int64)
    pixel = np.concatenate(px) if px else np.zeros(0, dtype=np.int64)
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    vox = voxel_index(points, voxel_size)
    if len(vox) == 0:
        return VoxelGroups(voxel_size, np.zeros((0, 3), dtype=np.int64), np.zeros(1, dtype=np.int64),
                           frame, pixel, np.zeros(0, dtype=np.int64))
    keys, inverse = np.unique(vox, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    order = np.lexsort((pixel, frame, inverse))
    group = inverse[order]
    offsets = np.searchsorted(group, np.arange(len(keys) + 1))
    return VoxelGroups(voxel_size, keys, offsets.astype(np.int64), frame[order], pixel[order], group)


def refine_labels(groups: VoxelGroups, regions, classes=None):
    """Replace every grouped pixel's region distribution by its group mean.

    The mean runs over labeled members (nonzero rows); unlabeled members of a
    group receive it as well.

    ``regions`` is a list of (H, W, N) per-frame distributions over a shared
    region index space.  When ``classes`` (list of (N, K)) is given, class
    labels are re-derived from the refined assignment: each region's class
    becomes the mean, over window pixels whose refined argmax is that region,
    of the pixel's original expected class.  Regions that win no pixel keep
    their per-frame class rows.

    Returns ``(refined_regions, adjusted_classes)``.
    """
    shapes = [r.shape for r in regions]
    flat = [np.asarray(r, dtype=np.float64).reshape(-1, r.shape[-1]) for r in regions]
    refined = [f.copy() for f in flat]
    adjusted = None if classes is None else [np.asarray(c, dtype=np.float64).copy() for c in classes]
    if len(groups) == 0:
        return [r.reshape(s) for r, s in zip(refined, shapes)], adjusted
    N = flat[0].shape[1]
    vals = np.empty((len(groups.frame), N))
    for t in range(len(flat)):
        sel = groups.frame == t
        vals[sel] = flat[t][groups.pixel[sel]]
    sums = np.add.reduceat(vals, groups.offsets[:-1], axis=0)
    # unlabeled (all-zero) members do not dilute the mean; they inherit it
    labeled = np.add.reduceat((vals.sum(axis=1) > 0).astype(np.float64), groups.offsets[:-1])
    means = sums / np.maximum(labeled, 1.0)[:, None]
    new_vals = means[groups.group]
    for t in range(len(flat)):
        sel = groups.frame == t
        refined[t][groups.pixel[sel]] = new_vals[sel]

    if classes is not None:
        K = adjusted[0].shape[1]
        acc = np.zeros((N, K))
        cnt = np.zeros(N)
        for t in range(len(flat)):
            labeled = flat[t].sum(axis=1) > 0
            if not labeled.any():
                continue
            expected = flat[t][labeled] @ np.asarray(classes[t], dtype=np.float64)
            win = refined[t][labeled].argmax(axis=1)
            np.add.at(acc, win, expected)
            np.add.at(cnt, win, 1.0)
        hit = cnt > 0
        table = acc[hit] / cnt[hit, None]
        for c in adjusted:
            c[hit] = table
    return [r.reshape(s) for r, s in zip(refined, shapes)], adjusted
