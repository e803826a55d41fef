"""Mask-classification panoptic head over rendered 3-channel semantic embeddings.

Pixels are decoded by a small perceptron and scored against N learned region
embeddings; each region embedding is classified into K categories (plus an
optional trailing "no object" column used only in training).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import log_softmax, softmax

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class PanopticHead:
    regions: np.ndarray       # (N, H) region embeddings
    classifier: np.ndarray    # (H, K) or (H, K + 1) with a trailing no-object column
    w1: np.ndarray            # (3, H)
    b1: np.ndarray            # (H,)
    w2: np.ndarray            # (H, H)
    b2: np.ndarray            # (H,)
    null_class: bool = True

    @classmethod
    def create(cls, n_regions: int = 64, n_classes: int = 16, hidden: int = 16,
               null_class: bool = True, seed: int = 0) -> "PanopticHead":
        if n_regions < 1 or n_classes < 2 or hidden < 3:
            raise ValueError("need N >= 1, K >= 2, H >= 3")
        rng = np.random.default_rng(seed)
        n_out = n_classes + int(null_class)
        return cls(
            regions=rng.normal(scale=1.0 / np.sqrt(hidden), size=(n_regions, hidden)),
            classifier=rng.normal(scale=0.1, size=(hidden, n_out)),
            w1=rng.normal(scale=1.5, size=(3, hidden)),
            b1=rng.normal(scale=0.5, size=hidden),
            w2=rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, hidden)),
            b2=np.zeros(hidden),
            null_class=null_class,
        )

    @property
    def n_regions(self) -> int:
        return self.regions.shape[0]

    @property
    def hidden(self) -> int:
        return self.regions.shape[1]

    @property
    def n_classes(self) -> int:
        """Real categories, excluding the no-object column."""
        return self.classifier.shape[1] - int(self.null_class)

    def params(self) -> dict[str, np.ndarray]:
        return {"regions": self.regions, "classifier": self.classifier, "w1": self.w1,
                "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "PanopticHead":
        return PanopticHead(**{k: v.copy() for k, v in self.params().items()},
                            null_class=self.null_class)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params().values())


@dataclass
class HeadGradients:
    regions: np.ndarray
    classifier: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def zeros_like(cls, head: PanopticHead) -> "HeadGradients":
        return cls(**{k: np.zeros_like(v) for k, v in head.params().items()})

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("regions", "classifier", "w1", "b1", "w2", "b2")}

    def __iadd__(self, other: "HeadGradients") -> "HeadGradients":
        for k, v in other.params().items():
            getattr(self, k)[...] += v
        return self


@dataclass
class PanopticSegmentation:
    region_map: np.ndarray      # (H, W) region id, -1 = void
    region_class: np.ndarray    # (N,) argmax real class per region
    region_conf: np.ndarray     # (N,) probability of that class
    kept: np.ndarray            # (N,) regions that survived filtering

    def semantic(self) -> np.ndarray:
        """Per-pixel class id, -1 = void."""
        return np.where(self.region_map >= 0, self.region_class[np.maximum(self.region_map, 0)], -1)

    def panoptic_ids(self) -> np.ndarray:
        """``class << 16 | region`` ids, 0xFFFFFFFF = void."""
        rm = self.region_map
        cls = self.region_class[np.maximum(rm, 0)].astype(np.uint32)
        ids = (cls << np.uint32(16)) | rm.astype(np.uint32)
        return np.where(rm >= 0, ids, np.uint32(0xFFFFFFFF)).astype(np.uint32)


# --------------------------------------------------------------------------
# forward / backward of the head
# --------------------------------------------------------------------------

@dataclass
class _DecodeCache:
    s: np.ndarray
    pre: np.ndarray
    hid: np.ndarray
    out: np.ndarray


def _decode(head: PanopticHead, s: np.ndarray) -> _DecodeCache:
    pre = s @ head.w1 + head.b1
    hid = np.tanh(pre)
    out = hid @ head.w2 + head.b2
    return _DecodeCache(s, pre, hid, out)


def decode(head: PanopticHead, s: np.ndarray) -> np.ndarray:
    """Lift (..., 3) semantic embeddings to (..., H)."""
    s = np.asarray(s, dtype=np.float64)
    return _decode(head, s.reshape(-1, 3)).out.reshape(*s.shape[:-1], head.hidden)


def region_logits(S_img: np.ndarray, head: PanopticHead) -> np.ndarray:
    """Per-pixel region scores: decoded embedding times each region embedding."""
    S_img = np.asarray(S_img, dtype=np.float64)
    if S_img.shape[-1] != 3:
        raise ValueError("semantic raster must have 3 channels")
    return decode(head, S_img) @ head.regions.T


def classify_regions(head: PanopticHead) -> np.ndarray:
    """Row-wise softmax of region embeddings times the classifier, (N, K[+1])."""
    return softmax(head.regions @ head.classifier, axis=1)


def region_logits_backward(head: PanopticHead, S_flat: np.ndarray, d_logits: np.ndarray,
                           grads: HeadGradients) -> np.ndarray:
    """Accumulate head gradients for (P, N) logit gradients; return dL/dS (P, 3)."""
    c = _decode(head, S_flat)
    grads.regions += d_logits.T @ c.out
    d_out = d_logits @ head.regions
    grads.w2 += c.hid.T @ d_out
    grads.b2 += d_out.sum(axis=0)
    d_pre = (d_out @ head.w2.T) * (1.0 - c.hid ** 2)
    grads.w1 += c.s.T @ d_pre
    grads.b1 += d_pre.sum(axis=0)
    return d_pre @ head.w1.T


def class_logits_backward(head: PanopticHead, d_class_logits: np.ndarray, grads: HeadGradients) -> None:
    grads.regions += d_class_logits @ head.classifier.T
    grads.classifier += head.regions.T @ d_class_logits


# --------------------------------------------------------------------------
# losses (value, d/d logits)
# --------------------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_focal_loss(logits: np.ndarray, targets: np.ndarray, alpha: float = FOCAL_ALPHA,
                       gamma: float = FOCAL_GAMMA):
    """Per-mask mean over pixels of the sigmoid focal loss; returns ``(per_mask, grad)``.

    ``logits`` and ``targets`` are (M, P); soft targets in [0, 1] are allowed.
    """
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    p = _sigmoid(x)
    ce = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    p_t = p * t + (1 - p) * (1 - t)
    mod = (1 - p_t) ** gamma
    a_t = alpha * t + (1 - alpha) * (1 - t)
    P = x.shape[-1]
    loss = (a_t * ce * mod).mean(axis=-1)
    dmod = -gamma * (1 - p_t) ** (gamma - 1) * (2 * t - 1) * p * (1 - p)
    grad = a_t * ((p - t) * mod + ce * dmod) / P
    return loss, grad


def dice_loss(logits: np.ndarray, targets: np.ndarray):
    """Per-mask ``1 - (2|p t| + 1) / (|p| + |t| + 1)`` on sigmoid masks; ``(per_mask, grad)``."""
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    p = _sigmoid(x)
    num = 2 * (p * t).sum(axis=-1) + 1
    den = p.sum(axis=-1) + t.sum(axis=-1) + 1
    loss = 1 - num / den
    dp = -(2 * t * den[..., None] - num[..., None]) / den[..., None] ** 2
    return loss, dp * p * (1 - p)


def soft_cross_entropy(logits: np.ndarray, targets: np.ndarray, weights: Optional[np.ndarray] = None):
    """Weighted mean of ``-sum(q log softmax(z))`` over rows; ``(value, grad)``."""
    z = np.asarray(logits, dtype=np.float64)
    q = np.asarray(targets, dtype=np.float64)
    w = np.ones(len(z)) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if wsum == 0:
        return 0.0, np.zeros_like(z)
    ls = log_softmax(z, axis=1)
    per = -(q * ls).sum(axis=1)
    grad = (np.exp(ls) * q.sum(axis=1, keepdims=True) - q) * (w / wsum)[:, None]
    return float((w * per).sum() / wsum), grad


# --------------------------------------------------------------------------
# matching
# --------------------------------------------------------------------------

def match_cost_matrix(pred_logits: np.ndarray, pseudo_masks: np.ndarray, pred_class_probs: np.ndarray,
                      pseudo_classes: np.ndarray, w_class: float = 1.0, w_dice: float = 1.0,
                      w_focal: float = 20.0) -> np.ndarray:
    """(N, M) cost: dice + focal between every mask pair, minus log class probability.

    ``pseudo_classes`` is an (M, K) distribution; the class term uses the
    expected log-probability under it.
    """
    x = np.asarray(pred_logits, dtype=np.float64)
    t = np.asarray(pseudo_masks, dtype=np.float64)
    P = x.shape[1]
    p = _sigmoid(x)
    dice = 1 - (2 * p @ t.T + 1) / (p.sum(1)[:, None] + t.sum(1)[None, :] + 1)
    # focal loss against t=1 and t=0 for every pixel, combined linearly in t
    ce_pos = np.maximum(x, 0) - x + np.log1p(np.exp(-np.abs(x)))
    ce_neg = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    f_pos = FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * ce_pos
    f_neg = (1 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * ce_neg
    focal = (f_pos @ t.T + f_neg @ (1 - t).T) / P
    K = pseudo_classes.shape[1]
    logp = np.log(np.clip(pred_class_probs[:, :K], 1e-12, None))
    cls = -(logp @ np.asarray(pseudo_classes, dtype=np.float64).T)
    return w_dice * dice + w_focal * focal + w_class * cls


def linear_assignment(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost (partial, rectangular) assignment: ``(rows, cols)``."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)
    return rows.astype(np.int64), cols.astype(np.int64)


def hungarian_match(pred_logits, pseudo_masks, pred_class_probs, pseudo_classes,
                    w_class: float = 1.0, w_dice: float = 1.0, w_focal: float = 20.0):
    """Predicted region -> pseudo mask pairs minimizing the matching cost."""
    pseudo_masks = np.asarray(pseudo_masks)
    if len(pseudo_masks) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    cost = match_cost_matrix(pred_logits, pseudo_masks, pred_class_probs, pseudo_classes,
                             w_class, w_dice, w_focal)
    return linear_assignment(cost)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def panoptic_inference(R: np.ndarray, O: np.ndarray, n_classes: Optional[int] = None,
                       class_threshold: float = 0.5, keep_frac: float = 0.8,
                       mask_threshold: float = 0.5) -> PanopticSegmentation:
    """Turn region logits (H, W, N) and region class probabilities into segments.

    Regions whose best real-class probability is below ``class_threshold`` are
    dropped first.  Each pixel then goes to the surviving region maximizing
    region probability times class confidence; a region keeps only pixels
    where its own probability reaches ``mask_threshold`` and is dropped when
    that visible part is under ``keep_frac`` of its unoccluded mask.
    """
    R = np.asarray(R, dtype=np.float64)
    O = np.asarray(O, dtype=np.float64)
    H, W, N = R.shape
    K = O.shape[1] if n_classes is None else n_classes
    prob = softmax(R, axis=2).reshape(-1, N)
    real = O[:, :K]
    cls = real.argmax(axis=1)
    conf = real[np.arange(N), cls]
    keep = conf >= class_threshold
    region_map = np.full(H * W, -1, dtype=np.int64)
    kept = np.zeros(N, dtype=bool)
    if keep.any():
        ids = np.nonzero(keep)[0]
        score = prob[:, ids] * conf[ids]
        owner = ids[score.argmax(axis=1)]
        for i in ids:
            own = owner == i
            mask_area = own.sum()
            full = prob[:, i] >= mask_threshold
            orig_area = full.sum()
            vis = own & full
            if mask_area == 0 or orig_area == 0 or vis.sum() == 0:
                continue
            if mask_area / orig_area < keep_frac:
                continue
            region_map[vis] = i
            kept[i] = True
    return PanopticSegmentation(region_map.reshape(H, W), cls, conf, kept)
