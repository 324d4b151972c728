"""Representation diagnostics: HSIC/CKA, layer-pair CKA grids, cross-match
similarity decomposition and a binned mutual-information estimate."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractError, DegenerateInputError, ShapeError
from .tensor import Tensor
from .vit import decompose


def _arr(x):
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def centering_matrix(m):
    return np.eye(m) - np.full((m, m), 1.0 / m)


def hsic(K, Lm):
    """Empirical HSIC: tr(K H L H) / (m - 1)²."""
    K, Lm = _arr(K), _arr(Lm)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape != Lm.shape:
        raise ShapeError(f"hsic needs two equal square matrices, got {K.shape} and {Lm.shape}")
    m = K.shape[0]
    if m < 2:
        raise ContractError("hsic needs at least 2 samples")
    H = centering_matrix(m)
    return float(np.trace(K @ H @ Lm @ H) / (m - 1) ** 2)


def cka(X, Y):
    """Linear CKA between m×p and m×q feature matrices (rows are samples)."""
    X, Y = _arr(X), _arr(Y)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"cka needs m×p and m×q matrices, got {X.shape} and {Y.shape}")
    if X.shape[0] < 2:
        raise ContractError("cka needs at least 2 samples")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    K = X @ X.T
    Lm = Y @ Y.T
    kk = hsic(K, K)
    ll = hsic(Lm, Lm)
    # each side judged against its own magnitude so CKA stays scale invariant
    for side, self_hsic, gram in (("X", kk, K), ("Y", ll, Lm)):
        if self_hsic <= 1e-12 * max(np.abs(gram).max(), 1e-300) ** 2:
            raise DegenerateInputError(f"representation {side} is constant; CKA undefined",
                                       side=side)
    return float(hsic(K, Lm) / np.sqrt(kk * ll))


@dataclass
class CkaMatrix:
    values: np.ndarray
    row_domain: str = "source"
    col_domain: str = "target"
    aggregates: dict = field(default_factory=dict)

    @property
    def dims(self):
        return list(self.values.shape)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = self.values.shape[1]
        writer.writerow([f"{self.row_domain}\\{self.col_domain}"] + [f"layer{j}" for j in range(cols)])
        for i, row in enumerate(self.values):
            writer.writerow([f"layer{i}"] + [repr(float(v)) for v in row])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({
            "dims": self.dims,
            "row_domain": self.row_domain,
            "col_domain": self.col_domain,
            "values": self.values.tolist(),
            "aggregates": self.aggregates,
        }, indent=2)

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        row_domain, col_domain = rows[0][0].split("\\", 1)
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(values, row_domain, col_domain)


def token_mean_features(component):
    """B×d×N (or list of d×N) component outputs -> B×d per-image features."""
    data = _arr(component)
    if data.ndim == 2:
        data = data[None]
    return data.mean(axis=-1)


def _stream_layer_features(streams):
    """List of ResidualStream (single or batched) -> list over components of m×d arrays."""
    per_layer = None
    for stream in streams:
        feats = [token_mean_features(c) for c in stream.contributions]
        if per_layer is None:
            per_layer = [[f] for f in feats]
        else:
            if len(feats) != len(per_layer):
                raise ShapeError("streams disagree on component count")
            for acc, f in zip(per_layer, feats):
                acc.append(f)
    return [np.concatenate(acc, axis=0) for acc in per_layer]


def layer_pair_cka(source_streams, target_streams):
    """Entry (i, j) = CKA(source component i, target component j) on token-mean features.

    Rows of the two feature matrices are paired by position, so both lists must
    describe the same number of images.
    """
    if not source_streams or not target_streams:
        raise ContractError("layer_pair_cka needs non-empty stream lists")
    src = _stream_layer_features(source_streams)
    tgt = _stream_layer_features(target_streams)
    if src[0].shape[0] != tgt[0].shape[0]:
        raise ShapeError(f"image counts differ: {src[0].shape[0]} vs {tgt[0].shape[0]}")
    out = np.zeros((len(src), len(tgt)))
    for i, x in enumerate(src):
        for j, y in enumerate(tgt):
            try:
                out[i, j] = cka(x, y)
            except DegenerateInputError as exc:
                raise DegenerateInputError(f"layer pair ({i}, {j}): {exc}", side=exc.side) from exc
    return CkaMatrix(out)


def final_output_cka(source_streams, target_streams):
    x = np.concatenate([token_mean_features(s.final) for s in source_streams], axis=0)
    y = np.concatenate([token_mean_features(s.final) for s in target_streams], axis=0)
    return cka(x, y)


def cka_aggregates(matrix, final_output_cka, k):
    """Final-output CKA, diagonal mean, and mean of the k largest / smallest entries."""
    values = matrix.values if isinstance(matrix, CkaMatrix) else np.asarray(matrix)
    if k < 1:
        raise ContractError("k must be >= 1")
    if k > values.size:
        raise ContractError(f"k={k} exceeds the {values.size} grid entries")
    ordered = np.sort(values.ravel())
    result = {
        "final": float(final_output_cka),
        "layerwise_avg": float(np.mean(np.diag(values))),
        "topk_avg": float(ordered[-k:].mean()),
        "bottomk_avg": float(ordered[:k].mean()),
        "grid_avg": float(values.mean()),
        "k": int(k),
    }
    if isinstance(matrix, CkaMatrix):
        matrix.aggregates = result
    return result


@dataclass
class SimilarityDecomposition:
    total: float
    cross_terms: np.ndarray
    norm_product: float

    def recomposed(self):
        return float(self.cross_terms.sum() / self.norm_product)


def decomposed_similarity(stream_s, stream_q):
    """Cosine of the two final outputs, plus every component-pair dot product."""
    comps_s = [_arr(c).ravel() for c in decompose(stream_s)]
    comps_q = [_arr(c).ravel() for c in decompose(stream_q)]
    if comps_s[0].shape != comps_q[0].shape:
        raise ShapeError("streams have different feature sizes")
    fs = _arr(stream_s.final).ravel()
    fq = _arr(stream_q.final).ravel()
    norm_product = float(np.linalg.norm(fs) * np.linalg.norm(fq))
    if norm_product == 0.0:
        raise DegenerateInputError("zero-norm final feature; cosine undefined")
    cross = np.array(comps_s) @ np.array(comps_q).T
    return SimilarityDecomposition(total=float(fs @ fq / norm_product), cross_terms=cross,
                                   norm_product=norm_product)


def mutual_information(feats_a, feats_b, bins=8):
    """Mean over matched channels of binned MI, normalized by log(bins) into [0, 1]."""
    a, b = _arr(feats_a), _arr(feats_b)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"mutual_information needs equal m×d inputs, got {a.shape} and {b.shape}")
    if bins < 2:
        raise ContractError("bins must be >= 2")
    if a.shape[0] < bins:
        raise ContractError(f"need at least {bins} samples, got {a.shape[0]}")
    per_channel = _kernels.binned_mi(a, b, bins)
    return float(np.mean(per_channel) / np.log(bins))


def component_mi(components, bins=8):
    """Average normalized MI over all unordered pairs of components.

    Each component is B×d×N (or d×N); tokens of every image are pooled as samples.
    """
    mats = []
    for comp in components:
        data = _arr(comp)
        if data.ndim == 2:
            data = data[None]
        mats.append(np.moveaxis(data, 1, -1).reshape(-1, data.shape[1]))
    if len(mats) < 2:
        raise ContractError("need at least two components")
    scores = [mutual_information(mats[i], mats[j], bins)
              for i in range(len(mats)) for j in range(i + 1, len(mats))]
    return float(np.mean(scores))
