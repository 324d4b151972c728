"""Orthogonal space decoupling: a rank-r bottleneck over channel-stacked
component features, with a Frobenius orthogonality penalty on the bottleneck."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

W_IN = "osd.w_in"
W_ORTH = "osd.w_orth"
W_OUT = "osd.w_out"
# names left trainable while adapting to a target domain
TARGET_TRAINABLE = (W_ORTH,)


@dataclass
class OsdParams:
    w_in: Tensor  # (L·d) × r
    w_orth: Tensor  # r × r, a 1×1 convolution
    w_out: Tensor  # r × (L·d)

    @property
    def rank(self):
        return self.w_orth.shape[0]

    @classmethod
    def from_params(cls, params):
        return cls(params[W_IN], params[W_ORTH], params[W_OUT])

    def as_dict(self):
        return {W_IN: self.w_in, W_ORTH: self.w_orth, W_OUT: self.w_out}


@dataclass
class OsdActivations:
    f_con: Tensor
    f_orth: Tensor
    f_up: Tensor


def init_osd(channels, rank, rng, dtype=np.float32):
    """Fan-in uniform in/out maps; w_orth starts at the identity."""
    if rank < 1:
        raise ContractError("rank must be >= 1")
    b_in = 1.0 / np.sqrt(channels)
    b_out = 1.0 / np.sqrt(rank)
    return OsdParams(
        w_in=T.parameter(rng.uniform(-b_in, b_in, (channels, rank)).astype(dtype), W_IN),
        w_orth=T.parameter(np.eye(rank, dtype=dtype), W_ORTH),
        w_out=T.parameter(rng.uniform(-b_out, b_out, (rank, channels)).astype(dtype), W_OUT),
    )


def concat_components(components):
    """Stack L maps of shape (..., d, n, n) along channels -> (..., L·d, n, n)."""
    if not components:
        raise ContractError("no components to concatenate")
    shape = components[0].shape
    for comp in components:
        if comp.shape != shape:
            raise ShapeError(f"component shape {comp.shape} != {shape}")
    if len(components) == 1:
        return components[0]
    return T.concat(components, axis=-3)


def split_components(f_up, dim):
    """Inverse of :func:`concat_components` for components with ``dim`` channels."""
    channels = f_up.shape[-3]
    if channels % dim:
        raise ShapeError(f"{channels} channels do not split into blocks of {dim}")
    if channels == dim:
        return [f_up]
    return T.split(f_up, channels // dim, axis=f_up.ndim - 3)


def _pointwise(weight_t, x):
    # 1×1 map applied at every spatial position: (out×in) · (..., in, n·n)
    *lead, c, h, w = x.shape
    flat = x.reshape(*lead, c, h * w)
    out = T.matmul(weight_t, flat)
    return out.reshape(*lead, out.shape[-2], h, w)


def osd_forward(f_con, params):
    if f_con.shape[-3] != params.w_in.shape[0]:
        raise ShapeError(f"f_con has {f_con.shape[-3]} channels, w_in expects {params.w_in.shape[0]}")
    f_down = _pointwise(params.w_in.T, f_con)
    f_orth = _pointwise(params.w_orth, f_down)
    f_up = _pointwise(params.w_out.T, f_orth)
    return OsdActivations(f_con=f_con, f_orth=f_orth, f_up=f_up)


def orth_loss(f_orth):
    """‖M Mᵀ − I‖_F² with M = f_orth reshaped to r × n²; batch inputs give the batch mean."""
    *lead, r, h, w = f_orth.shape
    m = f_orth.reshape(*lead, r, h * w)
    gram = T.matmul(m, m.T)
    resid = gram - np.eye(r, dtype=f_orth.dtype)
    per_item = (resid * resid).sum(axis=(-1, -2))
    return per_item.mean() if lead else per_item
