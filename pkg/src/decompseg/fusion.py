"""Re-composition of score maps, prediction, losses and mIoU."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

AFW = "afw.w"
BCE_FLOOR = 1e-7


@dataclass
class FusionWeights:
    w: Tensor  # pairs × 2, columns (bg, fg)

    @classmethod
    def ones(cls, components, dtype=np.float32):
        return cls(T.parameter(np.ones((components * components, 2), dtype=dtype), AFW))

    @property
    def count(self):
        return self.w.size

    def to_csv(self):
        """Two rows (bg, fg) by L² pair columns."""
        data = np.asarray(self.w.data)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["channel"] + [f"pair{k}" for k in range(data.shape[0])])
        writer.writerow(["bg"] + [repr(float(v)) for v in data[:, 0]])
        writer.writerow(["fg"] + [repr(float(v)) for v in data[:, 1]])
        return buf.getvalue()


@dataclass
class Prediction:
    probs: Tensor  # (..., 2, h, w)
    labels: np.ndarray  # (..., h, w) in {0, 1}


def _maps(scores):
    return scores.maps if hasattr(scores, "maps") else scores


def fuse_source(scores):
    """Uniform mean over the pair axis: (..., P, 2, n, n) -> (..., 2, n, n)."""
    maps = _maps(scores)
    return maps.mean(axis=maps.ndim - 4)


def fuse_afw(scores, weights):
    """Σ_l w[l] ⊙ C(l) / P with per-pair (bg, fg) scalars broadcast over the map."""
    maps = _maps(scores)
    w = weights.w if isinstance(weights, FusionWeights) else weights
    pairs = maps.shape[-4]
    if w.shape != (pairs, 2):
        raise ShapeError(f"fusion weights {w.shape} do not match {pairs} pairs")
    weighted = maps * w.reshape(pairs, 2, 1, 1)
    return weighted.sum(axis=maps.ndim - 4) * (1.0 / pairs)


@lru_cache(maxsize=64)
def bilinear_matrix(out_size, in_size):
    """Rows interpolate a length-``in_size`` signal to ``out_size`` samples
    (half-pixel centers, edge clamped)."""
    mat = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), in_size - 1)
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    mat.setflags(write=False)
    return mat


def upsample(c_fusion, h, w):
    n_h, n_w = c_fusion.shape[-2:]
    uh = bilinear_matrix(h, n_h).astype(c_fusion.dtype)
    uw = bilinear_matrix(w, n_w).T.astype(c_fusion.dtype)
    return T.matmul(T.matmul(Tensor(uh), c_fusion), Tensor(uw))


def predict(c_fusion, h, w, temperature=10.0):
    """Bilinear upsample, two-class softmax of temperature-scaled scores, argmax.

    Ties resolve to background.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    if h < c_fusion.shape[-2] or w < c_fusion.shape[-1]:
        raise ContractError("output size must not be smaller than the score map")
    up = upsample(c_fusion, h, w)
    probs = T.softmax(up * float(temperature), axis=up.ndim - 3)
    labels = (up.data[..., 1, :, :] > up.data[..., 0, :, :]).astype(np.uint8)
    return Prediction(probs=probs, labels=labels)


def bce_loss(probs, target):
    """Mean over pixels of −log p(target), clamped at 1e-7."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if probs.shape[:-3] + probs.shape[-2:] != target.shape:
        raise ShapeError(f"probs {probs.shape} do not match target {target.shape}")
    t = (target != 0).astype(probs.dtype)
    axis = probs.ndim - 3
    p_fg = T.getitem(probs, (Ellipsis, 1, slice(None), slice(None))) if axis else probs[1]
    p_bg = T.getitem(probs, (Ellipsis, 0, slice(None), slice(None))) if axis else probs[0]
    p_true = p_fg * t + p_bg * (1.0 - t)
    return -T.log(T.clip_min(p_true, BCE_FLOOR)).mean()


def total_loss(bce, orth, lam):
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    if lam == 0:
        return bce
    return bce + orth * float(lam)


def miou(pred_labels, gt):
    """Per-class IoU with 0/0 -> 1 for an absent class, and their mean."""
    pred = np.asarray(pred_labels) != 0
    gt = np.asarray(gt) != 0
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")

    def iou(p, g):
        union = np.logical_or(p, g).sum()
        if union == 0:
            return 1.0
        return float(np.logical_and(p, g).sum() / union)

    fg = iou(pred, gt)
    bg = iou(~pred, ~gt)
    return {"iou_fg": fg, "iou_bg": bg, "mean": (fg + bg) / 2.0}
