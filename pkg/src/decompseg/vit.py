"""Toy ViT encoder whose forward pass records every residual increment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

PER_BLOCK = "per-block"
PER_SUBLAYER = "per-sublayer"
NORM_FREE = "norm-free"
PRE_NORM = "pre-norm"


@dataclass(frozen=True)
class VitConfig:
    layers: int = 4
    dim: int = 32
    patch: int = 8  # tokens per side; N = patch ** 2
    heads: int = 2
    mlp_ratio: int = 2
    granularity: str = PER_BLOCK
    norm_mode: str = NORM_FREE
    channels: int = 1

    def __post_init__(self):
        if self.layers < 1:
            raise ContractError("layers must be >= 1")
        if self.patch < 2:
            raise ContractError("patch (tokens per side) must be >= 2")
        if self.heads < 1 or self.dim % self.heads:
            raise ContractError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.granularity not in (PER_BLOCK, PER_SUBLAYER):
            raise ContractError(f"unknown granularity {self.granularity!r}")
        if self.norm_mode not in (NORM_FREE, PRE_NORM):
            raise ContractError(f"unknown norm_mode {self.norm_mode!r}")

    @property
    def tokens(self):
        return self.patch * self.patch

    @property
    def components(self):
        return self.layers if self.granularity == PER_BLOCK else 2 * self.layers

    @property
    def hidden(self):
        return self.dim * self.mlp_ratio


@dataclass
class ResidualStream:
    """Z⁰, the ordered residual increments, and the final state.

    Tensors are d×N for a single image or B×d×N for a batch.
    """

    z0: Tensor
    contributions: list
    final: Tensor
    granularity: str = PER_BLOCK


def init_params(config, rng, image_size, dtype=np.float32):
    """Fan-in uniform weights, zero biases, N(0, 0.02²) positional embeddings."""
    d, hidden = config.dim, config.hidden
    patch_px = _patch_pixels(config, image_size)
    fan_patch = config.channels * patch_px[0] * patch_px[1]

    def uniform(rows, cols):
        bound = 1.0 / np.sqrt(cols)
        return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)

    def zeros(rows):
        return np.zeros((rows, 1), dtype=dtype)

    raw = {
        "encoder.patch_w": uniform(d, fan_patch),
        "encoder.pos": (rng.standard_normal((d, config.tokens)) * 0.02).astype(dtype),
    }
    for layer in range(config.layers):
        pre = f"encoder.blocks.{layer}."
        for name in ("wq", "wk", "wv", "wo"):
            raw[pre + name] = uniform(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            raw[pre + name] = zeros(d)
        raw[pre + "w1"] = uniform(hidden, d)
        raw[pre + "b1"] = zeros(hidden)
        raw[pre + "w2"] = uniform(d, hidden)
        raw[pre + "b2"] = zeros(d)
        if config.norm_mode == PRE_NORM:
            raw[pre + "ln1_g"] = np.ones((d, 1), dtype=dtype)
            raw[pre + "ln1_b"] = zeros(d)
            raw[pre + "ln2_g"] = np.ones((d, 1), dtype=dtype)
            raw[pre + "ln2_b"] = zeros(d)
    return {name: T.parameter(value, name=name) for name, value in raw.items()}


def _patch_pixels(config, image_size):
    h, w = image_size
    n = config.patch
    if h % n or w % n:
        raise ShapeError(f"image {h}x{w} is not divisible into {n}x{n} patches")
    return h // n, w // n


def extract_patches(images, n):
    """(B, C, H, W) array -> (B, C·ph·pw, n²) array of flattened patches, row-major tokens."""
    images = np.asarray(images)
    b, c, h, w = images.shape
    if h % n or w % n:
        raise ShapeError(f"image {h}x{w} is not divisible into {n}x{n} patches")
    ph, pw = h // n, w // n
    x = images.reshape(b, c, n, ph, n, pw).transpose(0, 1, 3, 5, 2, 4)
    return x.reshape(b, c * ph * pw, n * n)


def patch_embed(image, params, config):
    """Z⁰ = W_patch · patches + positional embedding; no CLS token.

    ``image`` is C×H×W (returns d×N) or B×C×H×W (returns B×d×N).
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    single = data.ndim == 3
    if single:
        data = data[None]
    if data.shape[1] != config.channels:
        raise ShapeError(f"expected {config.channels} channels, got {data.shape[1]}")
    w = params["encoder.patch_w"]
    patches = extract_patches(data, config.patch).astype(w.dtype)
    if patches.shape[1] != w.shape[1]:
        raise ShapeError(f"patch vector length {patches.shape[1]} != projection width {w.shape[1]}")
    pos = params["encoder.pos"]
    if pos.shape != (config.dim, config.tokens):
        raise ShapeError(f"positional embedding must be {config.dim}x{config.tokens}")
    z0 = T.matmul(w, Tensor(patches)) + pos
    return z0[0] if single else z0


def _layer_norm(z, gain, bias, eps=1e-5):
    mu = z.mean(axis=-2, keepdims=True)
    centered = z - mu
    var = (centered * centered).mean(axis=-2, keepdims=True)
    return centered / T.sqrt(var + eps) * gain + bias


def msa(z, params, layer, config):
    """Multi-head self-attention on a B×d×N stream; returns its B×d×N output."""
    pre = f"encoder.blocks.{layer}."
    b, d, n_tok = z.shape
    h = config.heads
    dh = d // h
    q = (params[pre + "wq"] @ z + params[pre + "bq"]).reshape(b, h, dh, n_tok)
    k = (params[pre + "wk"] @ z + params[pre + "bk"]).reshape(b, h, dh, n_tok)
    v = (params[pre + "wv"] @ z + params[pre + "bv"]).reshape(b, h, dh, n_tok)
    scores = T.matmul(q.T, k) * (1.0 / np.sqrt(dh))  # (b, h, query, key)
    attn = T.softmax(scores, axis=-1)
    heads = T.matmul(v, attn.T).reshape(b, d, n_tok)
    return params[pre + "wo"] @ heads + params[pre + "bo"]


def mlp(z, params, layer):
    pre = f"encoder.blocks.{layer}."
    hidden = T.gelu(params[pre + "w1"] @ z + params[pre + "b1"])
    return params[pre + "w2"] @ hidden + params[pre + "b2"]


def forward_recorded(z0, params, config):
    """Run the residual updates and record each component's increment.

    In norm-free mode the increments are exactly MSAˡ(Zˡ⁻¹) and MLPˡ(Ẑˡ); in
    pre-norm mode they are the realized (normalized-input) increments, so the
    sum identity still holds by construction.
    """
    single = z0.ndim == 2
    z = z0.reshape(1, *z0.shape) if single else z0
    sublayers = []
    for layer in range(config.layers):
        pre = f"encoder.blocks.{layer}."
        if config.norm_mode == PRE_NORM:
            attn_in = _layer_norm(z, params[pre + "ln1_g"], params[pre + "ln1_b"])
        else:
            attn_in = z
        a = msa(attn_in, params, layer, config)
        z = z + a
        if config.norm_mode == PRE_NORM:
            mlp_in = _layer_norm(z, params[pre + "ln2_g"], params[pre + "ln2_b"])
        else:
            mlp_in = z
        m = mlp(mlp_in, params, layer)
        z = z + m
        sublayers.append((a, m))
    if config.granularity == PER_BLOCK:
        contribs = [a + m for a, m in sublayers]
    else:
        contribs = [x for pair in sublayers for x in pair]
    if single:
        contribs = [c[0] for c in contribs]
        z = z[0]
    return ResidualStream(z0=z0, contributions=contribs, final=z, granularity=config.granularity)


def encode(images, params, config):
    """Images (B×C×H×W) -> ResidualStream over the batch."""
    return forward_recorded(patch_embed(images, params, config), params, config)


def decompose(stream, granularity=None):
    """[Z⁰, component¹, …]; folds sublayer pairs into blocks when asked for per-block."""
    granularity = granularity or stream.granularity
    contribs = list(stream.contributions)
    if granularity == stream.granularity:
        return [stream.z0] + contribs
    if granularity == PER_BLOCK and stream.granularity == PER_SUBLAYER:
        return [stream.z0] + [contribs[i] + contribs[i + 1] for i in range(0, len(contribs), 2)]
    raise ContractError("cannot split per-block contributions into sublayers")


def reconstruct(components):
    """Elementwise sum of same-shaped components."""
    if not components:
        raise ContractError("reconstruct needs at least one component")
    shape = components[0].shape
    total = components[0]
    for comp in components[1:]:
        if comp.shape != shape:
            raise ShapeError(f"component shape {comp.shape} != {shape}")
        total = total + comp
    return total


def param_count(params, prefix=""):
    return sum(p.size for name, p in params.items() if name.startswith(prefix))
