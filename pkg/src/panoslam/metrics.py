"""Trajectory, reconstruction, rendering and panoptic evaluation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .scene import CameraPose

VOID = np.uint32(0xFFFFFFFF)


class MetricContractError(ValueError):
    pass


# --------------------------------------------------------------------------
# trajectory
# --------------------------------------------------------------------------

def rigid_align(src: np.ndarray, dst: np.ndarray):
    """Rotation and translation minimizing ``sum |R src_i + t - dst_i|^2`` (no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s


def _centers(poses) -> np.ndarray:
    return np.array([p.center() if isinstance(p, CameraPose) else np.asarray(p, dtype=np.float64)
                     for p in poses]).reshape(-1, 3)


def ate_rmse(est, gt) -> float:
    """Translational RMSE in cm after rigid alignment of camera centers.

    Accepts ``CameraPose`` sequences or (n, 3) position arrays.
    """
    e = _centers(est)
    g = _centers(gt)
    if len(e) != len(g):
        raise MetricContractError(f"trajectory lengths differ: {len(e)} vs {len(g)}")
    if len(e) < 2:
        raise MetricContractError("need at least two poses")
    R, t = rigid_align(e, g)
    res = e @ R.T + t - g
    return float(np.sqrt((res ** 2).sum(axis=1).mean()) * 100.0)


# --------------------------------------------------------------------------
# reconstruction / rendering
# --------------------------------------------------------------------------

def depth_l1(depth: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute depth error in cm over pixels with valid ground-truth depth."""
    depth = np.asarray(depth, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if depth.shape != gt.shape:
        raise MetricContractError("depth rasters differ in shape")
    valid = gt > 0
    if not valid.any():
        raise MetricContractError("no valid ground-truth depth")
    return float(np.abs(depth - gt)[valid].mean() * 100.0)


def psnr(img: np.ndarray, gt: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(img, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else float(10.0 * np.log10(1.0 / mse))


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim(img: np.ndarray, gt: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-covered window positions and channels (data range 1)."""
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricContractError("images differ in shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    w = _gauss_window(size, sigma)
    h = size // 2
    if a.shape[0] < size or a.shape[1] < size:
        raise MetricContractError(f"images must be at least {size}x{size}")

    def filt(x):
        y = correlate1d(correlate1d(x, w, axis=0, mode="constant"), w, axis=1, mode="constant")
        return y[h:x.shape[0] - h, h:x.shape[1] - h]

    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(num / den)
    return float(np.mean(vals))


def psnr_ssim(img, gt) -> tuple[float, float]:
    return psnr(img, gt), ssim(img, gt)


# --------------------------------------------------------------------------
# semantic / panoptic
# --------------------------------------------------------------------------

class Confusion:
    """Accumulated (K, K) confusion plus misses of void predictions."""

    def __init__(self, n_classes: int):
        self.k = n_classes
        self.matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
        self.missed = np.zeros(n_classes, dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred, dtype=np.int64).ravel()
        gt = np.asarray(gt, dtype=np.int64).ravel()
        keep = (gt >= 0) & (gt < self.k)
        pred, gt = pred[keep], gt[keep]
        hit = (pred >= 0) & (pred < self.k)
        np.add.at(self.matrix, (gt[hit], pred[hit]), 1)
        np.add.at(self.missed, gt[~hit], 1)

    def miou(self) -> float:
        tp = np.diag(self.matrix)
        gt_count = self.matrix.sum(axis=1) + self.missed
        fp = self.matrix.sum(axis=0) - tp
        present = gt_count > 0
        if not present.any():
            return float("nan")
        iou = tp[present] / (gt_count[present] + fp[present])
        return float(iou.mean() * 100.0)


def miou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> float:
    """Mean IoU (percent) over classes present in ``gt``; negative labels are void.

    Void ground-truth pixels are ignored; a void prediction on a labeled
    pixel is a miss for that pixel's class.
    """
    c = Confusion(n_classes)
    c.add(pred, gt)
    return c.miou()


def semantic_from_panoptic(ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.uint32)
    return np.where(ids == VOID, -1, (ids >> np.uint32(16)).astype(np.int64))


@dataclass
class PQStat:
    """Per-class running sums: IoU of matches, TP, FP, FN."""
    iou: dict = field(default_factory=dict)
    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)

    def _bump(self, d, c, v):
        d[c] = d.get(c, 0) + v

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        """Accumulate one image; ids are ``class << 16 | instance`` with 0xFFFFFFFF void."""
        pred = np.asarray(pred, dtype=np.uint32).ravel()
        gt = np.asarray(gt, dtype=np.uint32).ravel()
        if pred.shape != gt.shape:
            raise MetricContractError("panoptic rasters differ in shape")
        p_ids, p_area = np.unique(pred, return_counts=True)
        g_ids, g_area = np.unique(gt, return_counts=True)
        p_area = dict(zip(p_ids.tolist(), p_area.tolist()))
        g_area = dict(zip(g_ids.tolist(), g_area.tolist()))
        pair, inter = np.unique(np.stack([gt, pred], axis=1), axis=0, return_counts=True)
        inter_d = {(int(g), int(p)): int(n) for (g, p), n in zip(pair, inter)}
        void = int(VOID)
        g_matched, p_matched = set(), set()
        for (g, p), n in inter_d.items():
            if g == void or p == void or (g >> 16) != (p >> 16):
                continue
            union = p_area[p] + g_area[g] - n - inter_d.get((void, p), 0)
            iou = n / union
            if iou > 0.5:
                c = g >> 16
                self._bump(self.tp, c, 1)
                self._bump(self.iou, c, iou)
                g_matched.add(g)
                p_matched.add(p)
        for g in g_area:
            if g != void and g not in g_matched:
                self._bump(self.fn, g >> 16, 1)
        for p in p_area:
            if p == void or p in p_matched:
                continue
            # predictions lying mostly on unlabeled ground truth are not penalized
            if inter_d.get((void, p), 0) / p_area[p] > 0.5:
                continue
            self._bump(self.fp, p >> 16, 1)

    def per_class(self) -> dict[int, tuple[float, float, float]]:
        out = {}
        for c in sorted(set(self.tp) | set(self.fp) | set(self.fn)):
            tp, fp, fn = self.tp.get(c, 0), self.fp.get(c, 0), self.fn.get(c, 0)
            iou = self.iou.get(c, 0.0)
            denom = tp + 0.5 * fp + 0.5 * fn
            pq = iou / denom
            sq = iou / tp if tp else 0.0
            rq = tp / denom
            out[c] = (pq * 100.0, sq * 100.0, rq * 100.0)
        return out

    def summary(self) -> tuple[float, float, float]:
        pc = self.per_class()
        if not pc:
            return 0.0, 0.0, 0.0
        arr = np.array(list(pc.values()))
        return tuple(float(x) for x in arr.mean(axis=0))


def panoptic_quality(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """(PQ, SQ, RQ) in percent, averaged over classes with any segment."""
    st = PQStat()
    st.add(pred, gt)
    return st.summary()


@dataclass
class EvalReport:
    ate_rmse_cm: float
    depth_l1_cm: float
    psnr_db: float
    ssim: float
    miou_percent: float
    pq: float
    sq: float
    rq: float
    n_frames: int = 0
    n_keyframes: int = 0
    per_class_pq: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_pq"] = {int(k): [float(x) for x in v] for k, v in self.per_class_pq.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["per_class_pq"] = {int(k): tuple(v) for k, v in d.get("per_class_pq", {}).items()}
        return cls(**d)
