"""Ray-cast synthetic rooms: exact RGB-D + panoptic frames and noisy pseudo-labels.

World convention: y points down (matches the camera frame), so the floor sits
at positive y.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .scene import CameraPose, Frame, Intrinsics, backproject, pixel_grid

VOID = np.uint32(0xFFFFFFFF)
FLOOR, WALL, CEILING = 0, 1, 2
LIGHT_DIR = np.array([-0.35, -1.0, -0.45]) / np.linalg.norm([-0.35, -1.0, -0.45])
AMBIENT = 0.35


class SceneGenerationError(RuntimeError):
    pass


@dataclass
class Primitive:
    kind: str                   # "box" | "sphere"
    center: np.ndarray
    size: np.ndarray            # box half-extents (3,) or sphere radius (1,)
    class_id: int
    instance_id: int
    albedo: np.ndarray

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        ext = self.size if self.kind == "box" else np.repeat(self.size[0], 3)
        return self.center - ext, self.center + ext


@dataclass
class SceneSpec:
    n_objects: int = 8
    n_classes: int = 16
    room_half_extent: float = 3.0       # walls at +-x, +-z
    floor_y: float = 1.0
    ceiling_y: float = -1.6
    object_area: float = 1.3            # objects placed in [-a, a] on x and z
    min_size: float = 0.12
    max_size: float = 0.32
    sphere_fraction: float = 0.4
    include_room: bool = True
    max_retries: int = 200


@dataclass
class SyntheticScene:
    primitives: list[Primitive]
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    n_classes: int

    @property
    def objects(self) -> list[Primitive]:
        return [p for p in self.primitives if p.class_id > CEILING]


@dataclass
class NoiseConfig:
    flip_rate: float = 0.0
    permute_instances: bool = False
    boundary_radius: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_rate <= 1.0:
            raise ValueError("flip_rate must be in [0, 1]")
        if self.boundary_radius < 0:
            raise ValueError("boundary_radius must be >= 0")


@dataclass
class TrajectorySpec:
    n_frames: int = 50
    motion: str = "orbit"               # orbit | lateral | random_walk
    radius: float = 2.2
    height: float = -0.1
    arc_degrees: float = 40.0
    start_degrees: float = 0.0
    target: tuple = (0.0, 0.55, 0.0)
    max_step: float = 0.05
    lateral_extent: float = 0.6


def panoptic_id(class_id, instance_id):
    return (np.uint32(class_id) << np.uint32(16)) | np.uint32(instance_id)


def split_panoptic(ids: np.ndarray):
    ids = np.asarray(ids, dtype=np.uint32)
    void = ids == VOID
    cls = np.where(void, -1, (ids >> 16).astype(np.int64))
    inst = np.where(void, -1, (ids & 0xFFFF).astype(np.int64))
    return cls, inst


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------

def _random_albedo(rng) -> np.ndarray:
    h = rng.uniform(0, 1)
    s = rng.uniform(0.45, 0.9)
    v = rng.uniform(0.55, 0.95)
    return np.array(colorsys.hsv_to_rgb(h, s, v))


def aabb_overlap(a: Primitive, b: Primitive) -> bool:
    amin, amax = a.aabb()
    bmin, bmax = b.aabb()
    return bool(np.all(amin < bmax) and np.all(bmin < amax))


def _room(spec: SceneSpec, start_id: int) -> list[Primitive]:
    e, t = spec.room_half_extent, 0.05
    mid_y = 0.5 * (spec.floor_y + spec.ceiling_y)
    half_y = 0.5 * (spec.floor_y - spec.ceiling_y)
    boxes = [
        (FLOOR, (0.0, spec.floor_y + t, 0.0), (e, t, e), (0.62, 0.56, 0.48)),
        (CEILING, (0.0, spec.ceiling_y - t, 0.0), (e, t, e), (0.85, 0.85, 0.82)),
        (WALL, (e + t, mid_y, 0.0), (t, half_y, e), (0.55, 0.62, 0.70)),
        (WALL, (-e - t, mid_y, 0.0), (t, half_y, e), (0.70, 0.64, 0.52)),
        (WALL, (0.0, mid_y, e + t), (e, half_y, t), (0.50, 0.66, 0.56)),
        (WALL, (0.0, mid_y, -e - t), (e, half_y, t), (0.68, 0.54, 0.60)),
    ]
    return [Primitive("box", np.array(c, float), np.array(s, float), cls, start_id + i, np.array(a))
            for i, (cls, c, s, a) in enumerate(boxes)]


def generate_scene(spec: SceneSpec | None = None, seed: int = 0) -> SyntheticScene:
    spec = spec or SceneSpec()
    if spec.n_objects < 0 or (spec.n_objects == 0 and not spec.include_room):
        raise SceneGenerationError("scene needs at least one primitive")
    if spec.n_classes < 4:
        raise SceneGenerationError("need >= 4 classes (floor, wall, ceiling, objects)")
    rng = np.random.default_rng(seed)
    objects: list[Primitive] = []
    next_id = 1
    for _ in range(spec.n_objects):
        for _attempt in range(spec.max_retries):
            cls = int(rng.integers(CEILING + 1, spec.n_classes))
            if rng.uniform() < spec.sphere_fraction:
                r = rng.uniform(spec.min_size, spec.max_size)
                size = np.array([r])
                half_y = r
            else:
                size = rng.uniform(spec.min_size, spec.max_size, 3)
                half_y = size[1]
            x, z = rng.uniform(-spec.object_area, spec.object_area, 2)
            center = np.array([x, spec.floor_y - half_y - 1e-3, z])
            cand = Primitive("sphere" if len(size) == 1 else "box", center, size, cls, next_id,
                             _random_albedo(rng))
            if not any(aabb_overlap(cand, o) for o in objects):
                objects.append(cand)
                next_id += 1
                break
        else:
            raise SceneGenerationError(
                f"could not place object {len(objects) + 1} of {spec.n_objects} "
                f"after {spec.max_retries} attempts")
    prims = list(objects)
    if spec.include_room:
        prims += _room(spec, next_id)
    e = spec.room_half_extent
    return SyntheticScene(prims, np.array([-e, spec.ceiling_y, -e]), np.array([e, spec.floor_y, e]),
                          spec.n_classes)


# --------------------------------------------------------------------------
# ray casting
# --------------------------------------------------------------------------

def _intersect_box(o, d, prim: Primitive):
    """Entry distance along ``d`` (inf on miss) and the entry face normal."""
    lo, hi = prim.center - prim.size, prim.center + prim.size
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-6)
    t = np.where(hit, t_near, np.inf)
    normal = np.zeros_like(d)
    rows = np.arange(len(d))
    normal[rows, axis] = -np.sign(d[rows, axis])
    return t, normal


def _intersect_sphere(o, d, prim: Primitive):
    r = prim.size[0]
    oc = o - prim.center
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * (d @ oc)
    c = oc @ oc - r * r
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    hit = (disc >= 0) & (t > 1e-6)
    t = np.where(hit, t, np.inf)
    p = o + np.where(hit, t, 0)[:, None] * d
    normal = (p - prim.center) / r
    return t, normal


def intersect(prim: Primitive, o, d):
    return _intersect_box(o, d, prim) if prim.kind == "box" else _intersect_sphere(o, d, prim)


def camera_rays(pose: CameraPose, intr: Intrinsics):
    """World-frame ray origin and directions whose camera z-component is 1."""
    u, v = pixel_grid(intr)
    d_cam = backproject(u, v, np.ones_like(u), intr).reshape(-1, 3)
    return pose.center(), d_cam @ pose.R


@dataclass
class RayCast:
    depth: np.ndarray          # (H, W), 0 on miss
    prim_index: np.ndarray     # (H, W), -1 on miss
    normal: np.ndarray         # (H, W, 3)


def ray_cast(scene: SyntheticScene, pose: CameraPose, intr: Intrinsics) -> RayCast:
    o, d = camera_rays(pose, intr)
    n = len(d)
    best = np.full(n, np.inf)
    idx = np.full(n, -1, dtype=np.int64)
    normal = np.zeros((n, 3))
    for i, prim in enumerate(scene.primitives):
        t, nrm = intersect(prim, o, d)
        closer = t < best
        best[closer] = t[closer]
        idx[closer] = i
        normal[closer] = nrm[closer]
    depth = np.where(np.isfinite(best), best, 0.0)
    H, W = intr.shape
    return RayCast(depth.reshape(H, W), idx.reshape(H, W), normal.reshape(H, W, 3))


def render_ground_truth(scene: SyntheticScene, pose: CameraPose, intr: Intrinsics,
                        index: int = 0, quantize: bool = True) -> Frame:
    """Exact color, z-depth and panoptic ids; misses are void with depth 0.

    ``quantize`` rounds color to 8 bit and depth to float32 so the frame
    round-trips through the on-disk formats bit-exactly.
    """
    rc = ray_cast(scene, pose, intr)
    hit = rc.prim_index >= 0
    albedo = np.zeros(rc.normal.shape)
    pan = np.full(rc.depth.shape, VOID, dtype=np.uint32)
    for i, prim in enumerate(scene.primitives):
        m = rc.prim_index == i
        albedo[m] = prim.albedo
        pan[m] = panoptic_id(prim.class_id, prim.instance_id)
    shade = AMBIENT + (1 - AMBIENT) * np.clip(rc.normal @ LIGHT_DIR, 0.0, None)
    color = np.where(hit[..., None], albedo * shade[..., None], 0.0)
    depth = rc.depth
    if quantize:
        color = np.round(np.clip(color, 0, 1) * 255.0) / 255.0
        depth = depth.astype(np.float32).astype(np.float64)
    return Frame(color=color, depth=depth, index=index, gt_panoptic=pan)


# --------------------------------------------------------------------------
# pseudo-labels
# --------------------------------------------------------------------------

def corrupt_labels(gt_panoptic: np.ndarray, cfg: NoiseConfig, n_classes: int, frame_index: int = 0):
    """Per-view noisy pseudo-labels from a ground-truth panoptic raster.

    Returns ``(regions, classes)``: an (H, W, M) one-hot region raster and an
    (M, K) one-hot class table.  Region order is a fresh random permutation per
    view when ``cfg.permute_instances`` is set.
    """
    rng = np.random.default_rng([cfg.seed, frame_index])
    gt = np.asarray(gt_panoptic, dtype=np.uint32)
    valid = gt != VOID
    segs = np.unique(gt[valid])
    M = len(segs)
    H, W = gt.shape
    order = rng.permutation(M) if cfg.permute_instances else np.arange(M)
    label = np.full((H, W), -1, dtype=np.int64)
    if M:
        label[valid] = order[np.searchsorted(segs, gt[valid])]

    classes = np.zeros((M, n_classes))
    for i, seg in enumerate(segs):
        c = int(seg >> 16)
        if rng.uniform() < cfg.flip_rate:
            c = int(rng.choice([k for k in range(n_classes) if k != c]))
        classes[order[i], c] = 1.0

    if cfg.boundary_radius > 0 and M:
        grow = rng.uniform(size=M) < 0.5
        size = 2 * cfg.boundary_radius + 1
        claimable = valid & ~grow[np.maximum(label, 0)]
        out = label.copy()
        taken = np.zeros_like(valid)
        for k in np.nonzero(grow)[0]:
            reach = ndimage.maximum_filter(label == k, size=size, mode="constant")
            m = reach & claimable & ~taken
            out[m] = k
            taken |= m
        label = out

    regions = np.zeros((H, W, M))
    ys, xs = np.nonzero(label >= 0)
    regions[ys, xs, label[ys, xs]] = 1.0
    return regions, classes


def attach_pseudo_labels(frame: Frame, cfg: NoiseConfig, n_classes: int) -> Frame:
    regions, classes = corrupt_labels(frame.gt_panoptic, cfg, n_classes, frame.index)
    return Frame(color=frame.color, depth=frame.depth, index=frame.index, pseudo_regions=regions,
                 pseudo_classes=classes, gt_panoptic=frame.gt_panoptic)


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

def look_at(eye, target) -> CameraPose:
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    down = np.array([0.0, 1.0, 0.0])
    x = np.cross(down, f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])          # rows: camera axes in world
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    return CameraPose.from_matrix(T)


def generate_trajectory(spec: TrajectorySpec | None = None, seed: int = 0) -> list[CameraPose]:
    spec = spec or TrajectorySpec()
    target = np.asarray(spec.target, dtype=np.float64)
    n = spec.n_frames
    if spec.motion == "orbit":
        ang = np.deg2rad(spec.start_degrees + np.linspace(0.0, spec.arc_degrees, n))
        eyes = np.stack([spec.radius * np.sin(ang), np.full(n, spec.height),
                         -spec.radius * np.cos(ang)], axis=1)
    elif spec.motion == "lateral":
        xs = np.linspace(-spec.lateral_extent, spec.lateral_extent, n)
        eyes = np.stack([xs, np.full(n, spec.height), np.full(n, -spec.radius)], axis=1)
    elif spec.motion == "random_walk":
        rng = np.random.default_rng(seed)
        eyes = np.zeros((n, 3))
        eyes[0] = (0.0, spec.height, -spec.radius)
        vel = np.zeros(3)
        for i in range(1, n):
            vel = 0.8 * vel + 0.2 * rng.normal(scale=spec.max_step, size=3)
            step = np.linalg.norm(vel)
            if step > spec.max_step:
                vel *= spec.max_step / step
            eyes[i] = eyes[i - 1] + vel
    else:
        raise ValueError(f"unknown motion type {spec.motion!r}")
    return [look_at(e, target) for e in eyes]


def hit_fraction(scene: SyntheticScene, pose: CameraPose, intr: Intrinsics) -> float:
    return float((ray_cast(scene, pose, intr).prim_index >= 0).mean())


def default_intrinsics(width: int = 64, height: int = 64, fov_degrees: float = 56.0) -> Intrinsics:
    f = 0.5 * width / np.tan(np.deg2rad(fov_degrees) / 2)
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass
class SyntheticSequence:
    scene: SyntheticScene
    intrinsics: Intrinsics
    frames: list[Frame]
    gt_poses: list[CameraPose] = field(default_factory=list)


def make_sequence(scene_spec: SceneSpec | None = None, traj_spec: TrajectorySpec | None = None,
                  noise: NoiseConfig | None = None, intr: Intrinsics | None = None,
                  seed: int = 0) -> SyntheticSequence:
    scene_spec = scene_spec or SceneSpec()
    scene = generate_scene(scene_spec, seed)
    poses = generate_trajectory(traj_spec, seed)
    intr = intr or default_intrinsics()
    noise = noise or NoiseConfig(seed=seed)
    frames = []
    for i, pose in enumerate(poses):
        f = render_ground_truth(scene, pose, intr, index=i)
        frames.append(attach_pseudo_labels(f, noise, scene.n_classes))
    return SyntheticSequence(scene, intr, frames, poses)
