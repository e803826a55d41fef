"""Semantic Gaussian map, camera model and first-frame initialization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

OPACITY_EPS = 1e-6
MIN_RADIUS = 1e-6

# (name, width) in the order of the 13-value packed layout
PARAM_LAYOUT = (
    ("colors", 3),
    ("centers", 3),
    ("radii", 1),
    ("opacities", 1),
    ("semantics", 3),
    ("sem_radii", 1),
    ("sem_opacities", 1),
)
PARAM_NAMES = tuple(name for name, _ in PARAM_LAYOUT)


class InitializationError(ValueError):
    pass


# --------------------------------------------------------------------------
# quaternions, (w, x, y, z)
# --------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of ``q / |q|``."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def rotmat_grad_to_quat_grad(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Chain dL/dR through ``R(q / |q|)`` to the ambient 4-vector ``q``.

    The result is tangent to the sphere at ``q`` (orthogonal to ``q``).
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    w, x, y, z = q / n
    G = dR
    gw = 2 * (-z * G[0, 1] + y * G[0, 2] + z * G[1, 0] - x * G[1, 2] - y * G[2, 0] + x * G[2, 1])
    gx = 2 * (y * G[0, 1] + z * G[0, 2] + y * G[1, 0] - 2 * x * G[1, 1] - w * G[1, 2]
              + z * G[2, 0] + w * G[2, 1] - 2 * x * G[2, 2])
    gy = 2 * (-2 * y * G[0, 0] + x * G[0, 1] + w * G[0, 2] + x * G[1, 0] + z * G[1, 2]
              - w * G[2, 0] + z * G[2, 1] - 2 * y * G[2, 2])
    gz = 2 * (-2 * z * G[0, 0] - w * G[0, 1] + x * G[0, 2] + w * G[1, 0] - 2 * z * G[1, 1]
              + y * G[1, 2] + x * G[2, 0] + y * G[2, 1])
    g_unit = np.array([gw, gx, gy, gz])
    qn = q / n
    return (g_unit - qn * (qn @ g_unit)) / n


# --------------------------------------------------------------------------
# camera
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("width", "height"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer")
            object.__setattr__(self, name, int(v))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass
class CameraPose:
    """World-to-camera transform: ``x_cam = R(rotation) @ x_world + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = quat_normalize(self.rotation)
        self.translation = np.asarray(self.translation, dtype=np.float64).copy()

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "CameraPose":
        T = np.asarray(T, dtype=np.float64)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse_matrix(self) -> np.ndarray:
        R = self.R
        T = np.eye(4)
        T[:3, :3] = R.T
        T[:3, 3] = -R.T @ self.translation
        return T

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.translation

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.R.T + self.translation

    def camera_to_world(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.translation) @ self.R

    def copy(self) -> "CameraPose":
        return CameraPose(self.rotation.copy(), self.translation.copy())


# --------------------------------------------------------------------------
# frames
# --------------------------------------------------------------------------

@dataclass
class Frame:
    """One RGB-D observation plus optional pseudo panoptic labels.

    ``pseudo_regions`` is an (H, W, M) per-pixel distribution over M pseudo
    regions (all-zero rows mark unlabeled pixels); ``pseudo_classes`` is the
    (M, K) class distribution of each pseudo region.  ``gt_panoptic`` holds
    evaluation ids (``class << 16 | instance``, 0xFFFFFFFF = void) when known.
    """

    color: np.ndarray
    depth: np.ndarray
    index: int = 0
    pseudo_regions: Optional[np.ndarray] = None
    pseudo_classes: Optional[np.ndarray] = None
    gt_panoptic: Optional[np.ndarray] = None

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.color.ndim != 3 or self.color.shape[2] != 3:
            raise ValueError("color must be (H, W, 3)")
        if self.depth.shape != self.color.shape[:2]:
            raise ValueError("depth and color dimensions differ")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError("depth must be finite and non-negative")
        if self.pseudo_regions is not None:
            self.pseudo_regions = np.asarray(self.pseudo_regions, dtype=np.float64)
            if self.pseudo_regions.shape[:2] != self.depth.shape:
                raise ValueError("pseudo region raster does not match the frame")
            sums = self.pseudo_regions.sum(axis=2)
            if not np.all((np.abs(sums - 1) < 1e-6) | (sums == 0)):
                raise ValueError("pseudo region distributions must sum to 1")
        if self.gt_panoptic is not None:
            self.gt_panoptic = np.asarray(self.gt_panoptic, dtype=np.uint32)
            if self.gt_panoptic.shape != self.depth.shape:
                raise ValueError("panoptic raster does not match the frame")
        if self.pseudo_classes is not None:
            self.pseudo_classes = np.asarray(self.pseudo_classes, dtype=np.float64)
            if self.pseudo_regions is None or len(self.pseudo_classes) != self.pseudo_regions.shape[2]:
                raise ValueError("pseudo classes need one row per pseudo region")
            if len(self.pseudo_classes) and not np.allclose(self.pseudo_classes.sum(axis=1), 1, atol=1e-6):
                raise ValueError("pseudo class distributions must sum to 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    @property
    def has_labels(self) -> bool:
        return self.pseudo_regions is not None and self.pseudo_classes is not None


# --------------------------------------------------------------------------
# Gaussians
# --------------------------------------------------------------------------

@dataclass
class SemanticGaussian:
    color: np.ndarray
    center: np.ndarray
    radius: float
    opacity: float
    semantic: np.ndarray
    sem_radius: float
    sem_opacity: float

    def pack(self) -> np.ndarray:
        return np.concatenate([
            self.color, self.center, [self.radius, self.opacity],
            self.semantic, [self.sem_radius, self.sem_opacity],
        ]).astype(np.float64)


def gaussian_influence(center2d, radius2d, opacity, pixel) -> float:
    """Unnormalized isotropic Gaussian weighted by opacity, evaluated at ``pixel``.

    Pass the optical (radius, opacity) pair for the color stream and the
    semantic pair for the semantic stream.
    """
    diff = np.asarray(pixel, dtype=np.float64) - np.asarray(center2d, dtype=np.float64)
    return float(opacity * np.exp(-(diff @ diff) / (2.0 * radius2d * radius2d)))


class GaussianMap:
    """Growable struct-of-arrays store of semantic Gaussians."""

    def __init__(self, colors=None, centers=None, radii=None, opacities=None,
                 semantics=None, sem_radii=None, sem_opacities=None, creation_frame=None):
        z3 = np.zeros((0, 3))
        z1 = np.zeros(0)
        self.colors = np.array(z3 if colors is None else colors, dtype=np.float64).reshape(-1, 3)
        self.centers = np.array(z3 if centers is None else centers, dtype=np.float64).reshape(-1, 3)
        self.radii = np.array(z1 if radii is None else radii, dtype=np.float64).reshape(-1)
        self.opacities = np.array(z1 if opacities is None else opacities, dtype=np.float64).reshape(-1)
        self.semantics = np.array(z3 if semantics is None else semantics, dtype=np.float64).reshape(-1, 3)
        self.sem_radii = np.array(z1 if sem_radii is None else sem_radii, dtype=np.float64).reshape(-1)
        self.sem_opacities = np.array(z1 if sem_opacities is None else sem_opacities,
                                      dtype=np.float64).reshape(-1)
        n = len(self.colors)
        cf = np.zeros(n, dtype=np.int64) if creation_frame is None else creation_frame
        self.creation_frame = np.array(cf, dtype=np.int64).reshape(-1)
        for name in PARAM_NAMES:
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if len(self.creation_frame) != n:
            raise ValueError("creation_frame length mismatch")

    def __len__(self) -> int:
        return len(self.colors)

    def __getitem__(self, i: int) -> SemanticGaussian:
        return SemanticGaussian(self.colors[i].copy(), self.centers[i].copy(), float(self.radii[i]),
                                float(self.opacities[i]), self.semantics[i].copy(),
                                float(self.sem_radii[i]), float(self.sem_opacities[i]))

    @classmethod
    def from_gaussians(cls, gaussians, creation_frame=None) -> "GaussianMap":
        gaussians = list(gaussians)
        if not gaussians:
            return cls(creation_frame=creation_frame)
        packed = np.stack([g.pack() for g in gaussians])
        return cls.from_packed(packed, creation_frame)

    @classmethod
    def from_packed(cls, packed: np.ndarray, creation_frame=None) -> "GaussianMap":
        packed = np.asarray(packed, dtype=np.float64).reshape(-1, 13)
        cols = {}
        start = 0
        for name, width in PARAM_LAYOUT:
            block = packed[:, start:start + width]
            cols[name] = block if width > 1 else block[:, 0]
            start += width
        return cls(**cols, creation_frame=creation_frame)

    def pack(self) -> np.ndarray:
        """(N, 13) array in ``PARAM_LAYOUT`` order."""
        parts = [getattr(self, name).reshape(len(self), -1) for name in PARAM_NAMES]
        return np.concatenate(parts, axis=1) if len(self) else np.zeros((0, 13))

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "GaussianMap":
        return GaussianMap(**{k: v.copy() for k, v in self.params().items()},
                           creation_frame=self.creation_frame.copy())

    def extend(self, other: "GaussianMap") -> None:
        for name in PARAM_NAMES:
            setattr(self, name, np.concatenate([getattr(self, name), getattr(other, name)]))
        self.creation_frame = np.concatenate([self.creation_frame, other.creation_frame])

    def take(self, idx) -> "GaussianMap":
        return GaussianMap(**{k: v[idx].copy() for k, v in self.params().items()},
                           creation_frame=self.creation_frame[idx].copy())

    def clamp_(self) -> None:
        """Project parameters back onto their valid ranges (idempotent)."""
        np.clip(self.colors, 0.0, 1.0, out=self.colors)
        np.clip(self.opacities, OPACITY_EPS, 1.0 - OPACITY_EPS, out=self.opacities)
        np.clip(self.sem_opacities, OPACITY_EPS, 1.0 - OPACITY_EPS, out=self.sem_opacities)
        np.maximum(self.radii, MIN_RADIUS, out=self.radii)
        np.maximum(self.sem_radii, MIN_RADIUS, out=self.sem_radii)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params().values())

    def equals(self, other: "GaussianMap") -> bool:
        return (len(self) == len(other)
                and all(np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_NAMES)
                and np.array_equal(self.creation_frame, other.creation_frame))


def pixel_grid(intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel-center coordinates ``(u, v)`` as (H, W) arrays."""
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    return u.astype(np.float64), v.astype(np.float64)


def backproject(u, v, depth, intr: Intrinsics) -> np.ndarray:
    """Camera-frame points for pixel coordinates and z-depth."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    x = (u - intr.cx) / intr.fx * d
    y = (v - intr.cy) / intr.fy * d
    return np.stack([x, y, d], axis=-1)


def gaussians_from_pixels(frame: Frame, mask: np.ndarray, pose: CameraPose,
                          intr: Intrinsics) -> GaussianMap:
    """One new Gaussian per masked valid-depth pixel, unprojected through ``pose``."""
    sel = mask & frame.valid
    v, u = np.nonzero(sel)
    depth = frame.depth[v, u]
    pts_world = pose.camera_to_world(backproject(u, v, depth, intr))
    color = frame.color[v, u]
    radius = depth / intr.fx
    n = len(depth)
    half = np.full(n, 0.5)
    return GaussianMap(colors=color, centers=pts_world, radii=radius, opacities=half,
                       semantics=color.copy(), sem_radii=radius.copy(), sem_opacities=half.copy(),
                       creation_frame=np.full(n, frame.index, dtype=np.int64))


def init_map_from_first_frame(frame: Frame, intr: Intrinsics) -> GaussianMap:
    if frame.shape != intr.shape:
        raise InitializationError("frame does not match intrinsics")
    if not frame.valid.any():
        raise InitializationError("first frame has no valid depth")
    return gaussians_from_pixels(frame, np.ones(frame.shape, dtype=bool), CameraPose.identity(), intr)
