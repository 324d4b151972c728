"""Synthetic part-composed segmentation domains, episodic sampling and the
EPDS dataset file format.

Randomness comes from SplitMix64 (increment 0x9E3779B97F4A7C15, mix constants
0xBF58476D1CE4E5B9 / 0x94D049BB133111EB, shifts 30/27/31). Child seeds are
derived as ``mix(parent ^ fnv1a64(tag))`` so every stream is addressable by name.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import BadMagicError, ContractError, FormatError, TruncatedError, VersionError

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

EPDS_MAGIC = b"EPDS"
EPDS_VERSION = 1


# ---------------------------------------------------------------- PRNG


def _mix64(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text):
    h = FNV_OFFSET
    for byte in str(text).encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def derive_seed(parent, *tags):
    seed = int(parent) & MASK64
    for tag in tags:
        seed = _mix64((seed ^ fnv1a64(tag)) & MASK64)
    return seed


class SplitMix64:
    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        return _mix64(self.state)

    def random(self):
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, lo, hi):
        return lo + (hi - lo) * self.random()

    def integers(self, n):
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ContractError("integers() needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def fill_random(self, count):
        out = _kernels.u64_to_unit(_kernels.splitmix_fill(self.state, count))
        self.state = (self.state + count * 0x9E3779B97F4A7C15) & MASK64
        return out

    def choice_distinct(self, n, k):
        """k distinct indices from range(n) via a partial Fisher-Yates shuffle."""
        if k > n:
            raise ContractError(f"cannot draw {k} distinct items from {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.integers(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


# ---------------------------------------------------------------- domains

SHAPES = (_kernels.SHAPE_ELLIPSE, _kernels.SHAPE_RECT, _kernels.SHAPE_TRIANGLE)


@dataclass(frozen=True)
class DomainSpec:
    seed: int = 0
    image_size: tuple = (32, 32)
    channels: int = 1
    class_offset: int = 0
    grammar_seed: int | None = None  # defaults to ``seed``
    part_shapes: tuple = SHAPES
    parts: tuple = (2, 4)
    texture_freq: tuple = (0.08, 0.35)
    texture_offset: float = 0.0
    palette_rotation: float = 0.0
    background_hue: float = 0.1
    clutter_density: float = 0.2
    object_scale: tuple = (0.85, 1.15)


@dataclass(frozen=True)
class PartRule:
    shape: int
    offset: tuple  # (distance factor, angle) relative to the body
    radii: tuple
    angle: float
    freq: float
    tex_angle: float
    hue: float
    hue_amp: float


@dataclass
class Sample:
    class_id: int
    image: np.ndarray  # C×h×w float32
    mask: np.ndarray  # h×w uint8 in {0, 1}


@dataclass
class Dataset:
    records: list
    owners: list = field(default_factory=list, repr=False)  # renderer coverage logs

    def __len__(self):
        return len(self.records)

    def class_ids(self):
        return sorted({r.class_id for r in self.records})

    def by_class(self):
        groups = {}
        for idx, rec in enumerate(self.records):
            groups.setdefault(rec.class_id, []).append(idx)
        return groups

    def equals(self, other):
        if len(self.records) != len(other.records):
            return False
        for a, b in zip(self.records, other.records):
            if a.class_id != b.class_id or a.image.shape != b.image.shape:
                return False
            if a.image.tobytes() != b.image.tobytes() or a.mask.tobytes() != b.mask.tobytes():
                return False
        return True


def class_grammar(spec, class_id):
    """Deterministic part layout and texture statistics for one class."""
    rng = SplitMix64(derive_seed(spec.seed if spec.grammar_seed is None else spec.grammar_seed,
                                 "grammar", class_id))
    lo, hi = spec.parts
    count = lo + rng.integers(hi - lo + 1)
    rules = []
    for k in range(count):
        shape = spec.part_shapes[rng.integers(len(spec.part_shapes))]
        if k == 0:
            offset = (0.0, 0.0)
            radii = (rng.uniform(4.5, 7.0), rng.uniform(3.5, 6.0))
        else:
            offset = (rng.uniform(0.8, 1.3), rng.uniform(0.0, 2 * math.pi))
            radii = (rng.uniform(2.0, 4.0), rng.uniform(1.5, 3.5))
        rules.append(PartRule(
            shape=shape,
            offset=offset,
            radii=radii,
            angle=rng.uniform(0.0, math.pi),
            freq=rng.uniform(*spec.texture_freq),
            tex_angle=rng.uniform(0.0, math.pi),
            hue=rng.uniform(0.3, 0.9),
            hue_amp=rng.uniform(0.15, 0.45),
        ))
    return rules


def render_sample(spec, class_id, index):
    """Render one image; returns (image float32, mask uint8, owner int32).

    ``owner`` logs which primitive last wrote each pixel: 0 background, -1
    clutter, k > 0 object part k.
    """
    h, w = spec.image_size
    c = spec.channels
    rules = class_grammar(spec, class_id)
    geom = SplitMix64(derive_seed(spec.seed, "geometry", class_id, index))
    style = SplitMix64(derive_seed(spec.seed, "style", class_id, index))
    clutter = SplitMix64(derive_seed(spec.seed, "clutter", class_id, index))

    img = np.empty((c, h, w), dtype=np.float64)
    bg_hue = spec.background_hue + spec.palette_rotation + style.uniform(-0.05, 0.05)
    for ch in range(c):
        img[ch] = abs(2.0 * ((bg_hue + ch / c) % 1.0) - 1.0)
    mask = np.zeros((h, w), dtype=np.uint8)
    owner = np.zeros((h, w), dtype=np.int32)

    blobs = int(round(spec.clutter_density * 12))
    for _ in range(blobs):
        cx, cy = clutter.uniform(0, w), clutter.uniform(0, h)
        rx, ry = clutter.uniform(1.0, 3.0), clutter.uniform(1.0, 3.0)
        ang = clutter.uniform(0.0, math.pi)
        tex = clutter.uniform(0.0, math.pi)
        _kernels.rasterize(img, mask, owner, -1, SHAPES[clutter.integers(3)], cx, cy, rx, ry,
                           math.cos(ang), math.sin(ang),
                           clutter.uniform(*spec.texture_freq) + spec.texture_offset,
                           math.cos(tex), math.sin(tex), clutter.random(),
                           clutter.random() + spec.palette_rotation, clutter.uniform(0.1, 0.4), 0)

    cx = geom.uniform(0.35 * w, 0.65 * w)
    cy = geom.uniform(0.35 * h, 0.65 * h)
    scale = geom.uniform(*spec.object_scale) * min(h, w) / 32.0
    rot = geom.uniform(-0.6, 0.6)
    body = rules[0]
    for k, rule in enumerate(rules):
        dist, theta = rule.offset
        reach = dist * max(body.radii) * scale
        px = cx + reach * math.cos(theta + rot)
        py = cy + reach * math.sin(theta + rot)
        ang = rule.angle + rot + geom.uniform(-0.15, 0.15)
        rx = rule.radii[0] * scale * geom.uniform(0.9, 1.1)
        ry = rule.radii[1] * scale * geom.uniform(0.9, 1.1)
        tex = rule.tex_angle + rot
        freq = rule.freq + spec.texture_offset
        hue = rule.hue + spec.palette_rotation + style.uniform(-0.04, 0.04)
        _kernels.rasterize(img, mask, owner, k + 1, rule.shape, px, py, rx, ry,
                           math.cos(ang), math.sin(ang), freq, math.cos(tex), math.sin(tex),
                           style.random(), hue, rule.hue_amp, 1)
    return img.astype(np.float32), mask, owner


def generate_domain(spec, classes, samples_per_class, min_fg=0.06, max_fg=0.6):
    """Render ``classes`` × ``samples_per_class`` samples with ids from ``spec.class_offset``.

    Samples whose foreground fraction falls outside [min_fg, max_fg] are
    re-rendered with the next index of the same class.
    """
    if classes < 2:
        raise ContractError("a domain needs at least 2 classes")
    if samples_per_class < 2:
        raise ContractError("need at least 2 samples per class (K >= 1 plus a query)")
    records, owners = [], []
    for k in range(classes):
        class_id = spec.class_offset + k
        index = 0
        kept = 0
        while kept < samples_per_class:
            img, mask, owner = render_sample(spec, class_id, index)
            index += 1
            frac = mask.mean()
            if not (min_fg <= frac <= max_fg):
                if index > 50 * samples_per_class:
                    raise ContractError(f"class {class_id} cannot produce usable masks")
                continue
            records.append(Sample(class_id, img, mask))
            owners.append(owner)
            kept += 1
    return Dataset(records, owners)


def restyle(spec, **knobs):
    """Same geometry and class grammar, different rendering statistics."""
    return replace(spec, **knobs)


# ---------------------------------------------------------------- episodes


@dataclass
class Episode:
    supports: list  # [(image, mask)] × K
    query: tuple
    class_id: int
    indices: tuple = ()

    @property
    def shots(self):
        return len(self.supports)

    def support_arrays(self):
        images = np.stack([img for img, _ in self.supports])
        masks = np.stack([m for _, m in self.supports])
        return images, masks


def sample_episode(dataset, K, rng_seed):
    """Uniform class among those with >= K+1 samples, then K+1 distinct samples."""
    if K < 1:
        raise ContractError("K must be >= 1")
    groups = {cid: idx for cid, idx in dataset.by_class().items() if len(idx) >= K + 1}
    if not groups:
        raise ContractError(f"no class has the {K + 1} samples needed for a {K}-shot episode")
    rng = SplitMix64(derive_seed(rng_seed, "episode"))
    class_ids = sorted(groups)
    class_id = class_ids[rng.integers(len(class_ids))]
    members = groups[class_id]
    picks = [members[i] for i in rng.choice_distinct(len(members), K + 1)]
    recs = [dataset.records[i] for i in picks]
    supports = [(r.image, r.mask) for r in recs[:K]]
    return Episode(supports, (recs[K].image, recs[K].mask), class_id, tuple(picks))


def episode_seeds(seed, count, tag="episodes"):
    return [derive_seed(seed, tag, i) for i in range(count)]


# ---------------------------------------------------------------- EPDS


_HEADER = struct.Struct("<4sII")
_RECORD = struct.Struct("<IHHB")


def encode_dataset(dataset):
    parts = [_HEADER.pack(EPDS_MAGIC, EPDS_VERSION, len(dataset.records))]
    for rec in dataset.records:
        c, h, w = rec.image.shape
        if rec.mask.shape != (h, w):
            raise ContractError("mask and image extents differ")
        parts.append(_RECORD.pack(rec.class_id, h, w, c))
        parts.append(np.ascontiguousarray(rec.image, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(rec.mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_dataset(blob):
    if len(blob) < 4 or blob[:4] != EPDS_MAGIC:
        raise BadMagicError(f"not an EPDS file (magic {bytes(blob[:4])!r})", 0)
    if len(blob) < _HEADER.size:
        raise TruncatedError("header truncated", len(blob))
    _, version, count = _HEADER.unpack_from(blob, 0)
    if version != EPDS_VERSION:
        raise VersionError(f"unsupported EPDS version {version}", 4)
    offset = _HEADER.size
    records = []
    for i in range(count):
        if offset + _RECORD.size > len(blob):
            raise TruncatedError(f"record {i} header truncated", offset)
        class_id, h, w, c = _RECORD.unpack_from(blob, offset)
        body = offset + _RECORD.size
        img_bytes = 4 * c * h * w
        end = body + img_bytes + h * w
        if end > len(blob):
            raise TruncatedError(f"record {i} payload truncated", offset)
        image = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=body)
        image = image.astype(np.float32).reshape(c, h, w)
        mask = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=body + img_bytes)
        if mask.size and mask.max() > 1:
            bad = int(np.argmax(mask > 1))
            raise FormatError(f"record {i} mask value outside {{0, 1}}", body + img_bytes + bad)
        records.append(Sample(int(class_id), image, mask.reshape(h, w).copy()))
        offset = end
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after {count} records", offset)
    return Dataset(records)


def write_dataset(dataset, path):
    with open(path, "wb") as fh:
        fh.write(encode_dataset(dataset))


def read_dataset(path):
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
