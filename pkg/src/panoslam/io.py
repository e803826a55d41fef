"""On-disk formats: sequences, label tensors, trajectories, checkpoints, reports.

Byte layouts are documented in docs/formats.md.  Readers validate and raise
``DataFormatError`` naming the offending file or frame; nothing is repaired.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import yaml
from PIL import Image

from .config import SlamConfig
from .mapping import Keyframe
from .metrics import EvalReport
from .panoptic import PanopticHead
from .scene import PARAM_NAMES, CameraPose, Frame, GaussianMap, Intrinsics

MANIFEST_NAME = "manifest.yaml"
MANIFEST_VERSION = 1
TENSOR_MAGIC = b"PSLT"
CHECKPOINT_MAGIC = b"PSLMCKPT"
CHECKPOINT_VERSION = 1


class DataFormatError(ValueError):
    pass


def _dump_yaml(data) -> str:
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=False)


def _write(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise DataFormatError(f"missing file {path}") from None


# --------------------------------------------------------------------------
# rasters
# --------------------------------------------------------------------------

def write_color(path, color: np.ndarray) -> None:
    c = np.asarray(color, dtype=np.float64)
    q = np.clip(np.round(c * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def read_color(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"missing file {path}")
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise DataFormatError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        return np.asarray(im, dtype=np.float64) / 255.0


def _write_raw(path, arr: np.ndarray, dtype: str) -> None:
    _write(Path(path), np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_raw(path, dtype: str, shape) -> np.ndarray:
    data = _read(Path(path))
    n = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(data) != n:
        raise DataFormatError(f"{path}: expected {n} bytes for shape {tuple(shape)}, found {len(data)}")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def write_depth(path, depth: np.ndarray, scale: float = 1.0) -> None:
    _write_raw(path, np.asarray(depth, dtype=np.float64) / scale, "<f4")


def read_depth(path, shape, scale: float = 1.0) -> np.ndarray:
    d = _read_raw(path, "<f4", shape).astype(np.float64) * scale
    if not np.all(np.isfinite(d)):
        raise DataFormatError(f"{path}: non-finite depth")
    if np.any(d < 0):
        raise DataFormatError(f"{path}: negative depth")
    return d


def write_panoptic(path, ids: np.ndarray) -> None:
    _write_raw(path, ids, "<u4")


def read_panoptic(path, shape) -> np.ndarray:
    return _read_raw(path, "<u4", shape).astype(np.uint32)


def write_tensor(path, arr: np.ndarray) -> None:
    """Float32 tensor of rank <= 3 behind a 16-byte header (magic + three uint32 dims)."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim > 3:
        raise ValueError("tensor rank must be <= 3")
    dims = list(a.shape) + [1] * (3 - a.ndim)
    _write(Path(path), TENSOR_MAGIC + struct.pack("<3I", *dims) + a.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    data = _read(Path(path))
    if len(data) < 16 or data[:4] != TENSOR_MAGIC:
        raise DataFormatError(f"{path}: bad tensor header")
    dims = struct.unpack("<3I", data[4:16])
    n = int(np.prod(dims))
    if len(data) != 16 + 4 * n:
        raise DataFormatError(f"{path}: payload does not match dims {dims}")
    arr = np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise DataFormatError(f"{path}: non-finite values")
    return arr


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

def format_trajectory(poses) -> str:
    lines = []
    for i, p in enumerate(poses):
        vals = list(p.rotation) + list(p.translation)
        lines.append(" ".join([str(i)] + ["%.17g" % v for v in vals]))
    return "".join(line + "\n" for line in lines)


def write_trajectory(path, poses) -> None:
    _write(Path(path), format_trajectory(poses).encode())


def read_trajectory(path) -> list[CameraPose]:
    path = Path(path)
    text = _read(path).decode()
    poses = []
    for ln, line in enumerate(text.splitlines()):
        parts = line.split()
        if len(parts) != 8:
            raise DataFormatError(f"{path}:{ln + 1}: expected 8 fields, found {len(parts)}")
        try:
            idx = int(parts[0])
            vals = [float(x) for x in parts[1:]]
        except ValueError:
            raise DataFormatError(f"{path}:{ln + 1}: not numeric") from None
        if idx != ln:
            raise DataFormatError(f"{path}:{ln + 1}: index {idx} out of order")
        if not np.all(np.isfinite(vals)) or np.linalg.norm(vals[:4]) == 0:
            raise DataFormatError(f"{path}:{ln + 1}: invalid pose")
        pose = CameraPose.__new__(CameraPose)
        # keep the stored quaternion bit-exact (already unit norm when written by us)
        pose.rotation = np.array(vals[:4])
        pose.translation = np.array(vals[4:])
        poses.append(pose)
    return poses


# --------------------------------------------------------------------------
# sequences
# --------------------------------------------------------------------------

@dataclass
class SequenceManifest:
    intrinsics: Intrinsics
    frames: list                      # dicts: index, color, depth[, panoptic, pseudo_regions, pseudo_classes]
    depth_scale: float = 1.0
    kind: str = "sequence"            # or "results": sparse frame indices
    poses: Optional[str] = None
    schema_version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def to_dict(self) -> dict:
        i = self.intrinsics
        return {"schema_version": self.schema_version, "kind": self.kind, "depth_scale": self.depth_scale,
                "intrinsics": {"fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy,
                               "width": i.width, "height": i.height},
                "n_frames": self.n_frames, "frames": self.frames, "poses": self.poses, "extra": self.extra}

    @classmethod
    def from_dict(cls, d, where: str = "manifest") -> "SequenceManifest":
        if not isinstance(d, dict):
            raise DataFormatError(f"{where}: not a mapping")
        allowed = {"schema_version", "kind", "depth_scale", "intrinsics", "n_frames", "frames", "poses", "extra"}
        unknown = set(d) - allowed
        if unknown:
            raise DataFormatError(f"{where}: unknown key '{sorted(unknown)[0]}'")
        for key in ("schema_version", "intrinsics", "frames", "n_frames"):
            if key not in d:
                raise DataFormatError(f"{where}: missing key '{key}'")
        if d["schema_version"] != MANIFEST_VERSION:
            raise DataFormatError(f"{where}: unsupported schema_version {d['schema_version']}")
        try:
            intr = Intrinsics(**d["intrinsics"])
        except (TypeError, ValueError) as exc:
            raise DataFormatError(f"{where}: bad intrinsics: {exc}") from None
        frames = d["frames"]
        kind = d.get("kind", "sequence")
        if kind not in ("sequence", "results"):
            raise DataFormatError(f"{where}: unknown kind '{kind}'")
        if not isinstance(frames, list) or d["n_frames"] != len(frames):
            raise DataFormatError(f"{where}: n_frames {d['n_frames']} does not match the frame list")
        prev = -1
        for pos, f in enumerate(frames):
            if not isinstance(f, dict) or "index" not in f or "color" not in f or "depth" not in f:
                raise DataFormatError(f"{where}: frame entry {pos} needs index, color and depth")
            idx = f["index"]
            if kind == "sequence" and idx != pos:
                raise DataFormatError(f"{where}: frame indices must be contiguous from 0 (entry {pos} has {idx})")
            if idx <= prev:
                raise DataFormatError(f"{where}: frame indices must increase (entry {pos} has {idx})")
            prev = idx
        scale = d.get("depth_scale", 1.0)
        if not isinstance(scale, (int, float)) or not scale > 0:
            raise DataFormatError(f"{where}: depth_scale must be positive")
        return cls(intr, frames, float(scale), kind, d.get("poses"), d["schema_version"], d.get("extra") or {})


def _frame_files(index: int, frame: Frame) -> dict:
    e = {"index": index, "color": f"color_{index:06d}.png", "depth": f"depth_{index:06d}.depth"}
    if frame.gt_panoptic is not None:
        e["panoptic"] = f"panoptic_{index:06d}.pan"
    if frame.has_labels:
        e["pseudo_regions"] = f"pseudo_regions_{index:06d}.bin"
        e["pseudo_classes"] = f"pseudo_classes_{index:06d}.bin"
    return e


def write_frame_files(root: Path, entry: dict, frame: Frame, scale: float) -> None:
    write_color(root / entry["color"], frame.color)
    write_depth(root / entry["depth"], frame.depth, scale)
    if "panoptic" in entry:
        write_panoptic(root / entry["panoptic"], frame.gt_panoptic)
    if "pseudo_regions" in entry:
        write_tensor(root / entry["pseudo_regions"], frame.pseudo_regions)
        write_tensor(root / entry["pseudo_classes"], frame.pseudo_classes)


def write_sequence(path, frames, intr: Intrinsics, gt_poses=None, depth_scale: float = 1.0,
                   kind: str = "sequence", indices=None, poses_name: str = "poses.txt",
                   extra: Optional[dict] = None) -> SequenceManifest:
    """Write frames (+ optional poses for every frame) under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    indices = list(range(len(frames))) if indices is None else list(indices)
    entries = []
    for idx, frame in zip(indices, frames):
        entry = _frame_files(idx, frame)
        write_frame_files(root, entry, frame, depth_scale)
        entries.append(entry)
    man = SequenceManifest(intr, entries, depth_scale, kind, None, extra=extra or {})
    if gt_poses is not None:
        man.poses = poses_name
        write_trajectory(root / poses_name, gt_poses)
    _write(root / MANIFEST_NAME, _dump_yaml(man.to_dict()).encode())
    return man


def read_manifest(path) -> SequenceManifest:
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise DataFormatError(f"no {MANIFEST_NAME} in {root}")
    try:
        data = yaml.safe_load(mpath.read_text())
    except yaml.YAMLError as exc:
        raise DataFormatError(f"{mpath}: invalid YAML: {exc}") from None
    return SequenceManifest.from_dict(data, str(mpath))


def read_frame(root: Path, man: SequenceManifest, entry: dict) -> Frame:
    idx = entry["index"]
    shape = man.intrinsics.shape
    try:
        color = read_color(root / entry["color"])
        if color.shape[:2] != shape:
            raise DataFormatError(f"color is {color.shape[1]}x{color.shape[0]}, expected {shape[1]}x{shape[0]}")
        depth = read_depth(root / entry["depth"], shape, man.depth_scale)
        pan = read_panoptic(root / entry["panoptic"], shape) if "panoptic" in entry else None
        regions = classes = None
        if "pseudo_regions" in entry:
            regions = read_tensor(root / entry["pseudo_regions"])
            classes = read_tensor(root / entry["pseudo_classes"])[:, :, 0]
            if regions.shape[:2] != shape:
                raise DataFormatError("pseudo region raster does not match the intrinsics")
        return Frame(color, depth, idx, regions, classes, pan)
    except (DataFormatError, ValueError) as exc:
        raise DataFormatError(f"frame {idx}: {exc}") from None


def iter_sequence(path) -> Iterator[Frame]:
    root = Path(path)
    man = read_manifest(root)
    for entry in man.frames:
        yield read_frame(root, man, entry)


@dataclass
class Sequence:
    manifest: SequenceManifest
    frames: list
    poses: Optional[list]

    @property
    def intrinsics(self) -> Intrinsics:
        return self.manifest.intrinsics


def read_sequence(path) -> Sequence:
    root = Path(path)
    man = read_manifest(root)
    frames = [read_frame(root, man, e) for e in man.frames]
    poses = read_trajectory(root / man.poses) if man.poses else None
    if poses is not None and man.kind == "sequence" and len(poses) != len(frames):
        raise DataFormatError(f"{root / man.poses}: {len(poses)} poses for {len(frames)} frames")
    return Sequence(man, frames, poses)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def dumps_report(report: EvalReport) -> str:
    return _dump_yaml(report.to_dict())


def write_report(path, report: EvalReport) -> None:
    _write(Path(path), dumps_report(report).encode())


def read_report(path) -> EvalReport:
    try:
        return EvalReport.from_dict(yaml.safe_load(_read(Path(path)).decode()))
    except (TypeError, yaml.YAMLError) as exc:
        raise DataFormatError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

class _Blob:
    def __init__(self):
        self.entries = []
        self.chunks = []
        self.offset = 0

    def add(self, name: str, arr: np.ndarray) -> None:
        arr = np.asarray(arr)
        dtype = {np.dtype(np.float64): "<f8", np.dtype(np.int64): "<i8", np.dtype(np.uint32): "<u4"}[arr.dtype]
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        self.entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                             "offset": self.offset, "nbytes": len(raw)})
        self.chunks.append(raw)
        self.offset += len(raw)


def _pose_vec(p: CameraPose) -> np.ndarray:
    return np.concatenate([p.rotation, p.translation])


def _vec_pose(v: np.ndarray) -> CameraPose:
    pose = CameraPose.__new__(CameraPose)
    pose.rotation = np.array(v[:4], dtype=np.float64)
    pose.translation = np.array(v[4:], dtype=np.float64)
    return pose


def write_checkpoint(path, state) -> None:
    """Serialize a ``SlamState`` (map, head, poses, keyframes, log, config)."""
    blob = _Blob()
    for name in PARAM_NAMES:
        blob.add(f"map/{name}", getattr(state.gmap, name))
    blob.add("map/creation_frame", state.gmap.creation_frame)
    for name, arr in state.head.params().items():
        blob.add(f"head/{name}", arr)
    blob.add("poses", np.array([_pose_vec(p) for p in state.poses]).reshape(-1, 7))
    kfs = []
    for k, kf in enumerate(state.keyframes):
        f = kf.frame
        blob.add(f"kf/{k}/pose", _pose_vec(kf.pose))
        blob.add(f"kf/{k}/color", f.color)
        blob.add(f"kf/{k}/depth", f.depth)
        flags = {"index": kf.index, "frame_index": f.index, "panoptic": f.gt_panoptic is not None,
                 "labels": f.has_labels}
        if f.gt_panoptic is not None:
            blob.add(f"kf/{k}/panoptic", f.gt_panoptic)
        if f.has_labels:
            blob.add(f"kf/{k}/pseudo_regions", f.pseudo_regions)
            blob.add(f"kf/{k}/pseudo_classes", f.pseudo_classes)
        kfs.append(flags)
    i = state.intr
    header = {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "intrinsics": {"fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy, "width": i.width, "height": i.height},
        "null_class": state.head.null_class,
        "frame_count": state.frame_count,
        "keyframes": kfs,
        "log": state.log,
        "arrays": blob.entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()
    _write(Path(path), CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes
           + b"".join(blob.chunks))


def read_checkpoint(path):
    from .pipeline import SlamState

    path = Path(path)
    data = _read(path)
    if data[:8] != CHECKPOINT_MAGIC or len(data) < 20:
        raise DataFormatError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[20:20 + hlen])
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: corrupt header: {exc}") from None
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise DataFormatError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = np.frombuffer(data, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                                          offset=start).reshape(e["shape"]).copy()
    cfg = SlamConfig.from_dict(header["config"])
    intr = Intrinsics(**header["intrinsics"])
    gmap = GaussianMap(**{n: arrays[f"map/{n}"] for n in PARAM_NAMES},
                       creation_frame=arrays["map/creation_frame"])
    head = PanopticHead(**{n: arrays[f"head/{n}"] for n in ("regions", "classifier", "w1", "b1", "w2", "b2")},
                        null_class=header["null_class"])
    poses = [_vec_pose(v) for v in arrays["poses"]]
    keyframes = []
    for k, flags in enumerate(header["keyframes"]):
        frame = Frame(arrays[f"kf/{k}/color"], arrays[f"kf/{k}/depth"], flags["frame_index"],
                      arrays.get(f"kf/{k}/pseudo_regions"), arrays.get(f"kf/{k}/pseudo_classes"),
                      arrays.get(f"kf/{k}/panoptic"))
        keyframes.append(Keyframe(flags["index"], _vec_pose(arrays[f"kf/{k}/pose"]), frame))
    return SlamState(cfg, intr, gmap, head, poses, keyframes, header["frame_count"], header["log"])
