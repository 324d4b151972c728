"""Cross-pattern comparison: masked-average prototypes per component, scored
against every query component."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import ContractError, DegenerateInputError, ShapeError
from .tensor import Tensor

METRICS = ("cosine", "euclidean", "dot")
PAIRINGS = ("cross", "positionwise")


@dataclass
class PrototypeSet:
    fg: Tensor  # L × d
    bg: Tensor  # L × d


@dataclass
class ScoreStack:
    """Score maps (..., P, 2, n, n); channel 0 background, channel 1 foreground.

    With cross pairing P = L² and row i·L + j compares query component i
    with prototype component j.
    """

    maps: Tensor
    metric: str
    components: int
    pairing: str = "cross"

    def pair_index(self, i, j):
        if self.pairing == "positionwise":
            if i != j:
                raise ContractError("positionwise stacks only hold i == j pairs")
            return i
        return i * self.components + j

    @property
    def pairs(self):
        return self.maps.shape[-4]

    def to_csv(self):
        """Long-form heatmap table: one row per (pair, class, y, x)."""
        data = np.asarray(self.maps.data)
        if data.ndim != 4:
            raise ShapeError("export expects a single (unbatched) stack")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["query_component", "prototype_component", "channel", "y", "x", "score"])
        for row in range(data.shape[0]):
            i, j = (row, row) if self.pairing == "positionwise" else divmod(row, self.components)
            for ch, name in enumerate(("bg", "fg")):
                for y in range(data.shape[2]):
                    for x in range(data.shape[3]):
                        writer.writerow([i, j, name, y, x, repr(float(data[row, ch, y, x]))])
        return buf.getvalue()


def downsample_mask(mask, n):
    """Binary h×w mask -> n×n token grid by area-majority vote (ties -> background)."""
    return _kernels.majority_downsample(np.asarray(mask), n)


def map_prototypes(support_components, mask):
    """Mask average pooling of every component.

    ``support_components`` holds L tensors of shape (d, n, n) or (K, d, n, n);
    ``mask`` is n×n or K×n×n. With K shots, each shot is pooled separately and
    the K prototypes are averaged.
    """
    feats = T.stack(support_components, axis=0)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if feats.ndim == 4:
        feats = feats.reshape(feats.shape[0], 1, *feats.shape[1:])
        mask = mask[None]
    L, K, d, h, w = feats.shape
    if mask.shape != (K, h, w):
        raise ShapeError(f"mask shape {mask.shape} does not match features {(K, h, w)}")
    fg = (mask != 0).reshape(K, h * w)
    counts_fg = fg.sum(axis=1)
    counts_bg = (~fg).sum(axis=1)
    if np.any(counts_fg == 0):
        raise DegenerateInputError("support mask has no foreground position", side="foreground")
    if np.any(counts_bg == 0):
        raise DegenerateInputError("support mask has no background position", side="background")
    dtype = feats.dtype
    weights = np.stack([(~fg) / counts_bg[:, None], fg / counts_fg[:, None]], axis=-1).astype(dtype)
    flat = feats.reshape(L, K, d, h * w)
    pooled = T.matmul(flat, weights)  # (L, K, d, 2)
    pooled = pooled.mean(axis=1)  # average over shots -> (L, d, 2)
    return PrototypeSet(fg=pooled[:, :, 1], bg=pooled[:, :, 0])


def distance(metric, x, p):
    """Similarity under ``metric``; larger always means closer (euclidean is negated)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    if metric == "cosine":
        nx, np_ = np.linalg.norm(x), np.linalg.norm(p)
        if nx == 0 or np_ == 0:
            raise DegenerateInputError("zero-norm vector under cosine")
        return float(x @ p / (nx * np_))
    if metric == "dot":
        return float(x @ p)
    if metric == "euclidean":
        return float(-np.linalg.norm(x - p))
    raise ContractError(f"unknown metric {metric!r}")


def cross_compare(query_components, protos, metric="cosine", pairing="cross"):
    """Score every query component against every prototype component.

    ``query_components``: L tensors (d, n, n) or (B, d, n, n). Returns a stack
    of shape (L², 2, n, n) or (B, L², 2, n, n); ``pairing="positionwise"``
    keeps only the L diagonal pairs.
    """
    L = len(query_components)
    if protos.fg.shape[0] != L:
        raise ShapeError(f"{L} query components but {protos.fg.shape[0]} prototype components")
    if metric not in METRICS:
        raise ContractError(f"unknown metric {metric!r}")
    if pairing not in PAIRINGS:
        raise ContractError(f"unknown pairing {pairing!r}")
    q = T.stack(query_components, axis=-4)  # (..., L, d, n, n)
    *lead, _, d, h, w = q.shape
    q = q.reshape(*lead, L, d, h * w)
    p = T.stack([protos.bg, protos.fg], axis=1)  # (L, 2, d)
    if metric == "cosine":
        qn2 = (q * q).sum(axis=-2, keepdims=True)
        pn2 = (p * p).sum(axis=-1, keepdims=True)
        if np.any(qn2.data == 0) or np.any(pn2.data == 0):
            raise DegenerateInputError("zero-norm feature under cosine")
        q = q / T.sqrt(qn2)
        p = p / T.sqrt(pn2)
    if metric in ("cosine", "dot"):
        if pairing == "cross":
            # (..., L, 1, d, N) against (L·2, d) -> (..., L, 2L, N)
            scores = T.matmul(p.reshape(L * 2, d), q)
            out = scores.reshape(*lead, L * L, 2, h, w)
        else:
            scores = T.matmul(p, q)  # (..., L, 2, N)
            out = scores.reshape(*lead, L, 2, h, w)
    else:
        if pairing == "cross":
            qb = q.reshape(*lead, L, 1, 1, d, h * w)
            pb = p.reshape(L, 2, d, 1)
        else:
            qb = q.reshape(*lead, L, 1, d, h * w)
            pb = p.reshape(L, 2, d, 1)
        diff = qb - pb
        dist = T.sqrt((diff * diff).sum(axis=-2))
        rows = L * L if pairing == "cross" else L
        out = (-dist).reshape(*lead, rows, 2, h, w)
    return ScoreStack(maps=out, metric=metric, components=L, pairing=pairing)
