"""Episodic source training, support-only target finetuning, evaluation and the
SDRC checkpoint format."""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import cpc, fusion, osd, vit
from . import tensor as T
from .episodes import derive_seed, sample_episode
from .errors import (BadMagicError, ContractError, DegenerateInputError, FormatError,
                     NonFiniteError, TruncatedError, VersionError)
from .tensor import Tensor

log = logging.getLogger(__name__)

SDRC_MAGIC = b"SDRC"
SDRC_VERSION = 1
META_CONFIG = "meta.config_utf8"
META_STEP = "meta.step"


# what CPC compares: the additive increments Layerˡ, or block outputs Zˡ
FEATURES = ("contributions", "hidden")


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 1500
    lr: float = 1e-3
    optimizer: str = "adam"
    lam: float = 0.1
    shots: int = 1
    metric: str = "cosine"
    pairing: str = "cross"
    use_cpc: bool = True
    use_osd: bool = True
    use_afw: bool = True
    rank: int = 8
    temperature: float = 10.0
    finetune_steps: int = 50
    finetune_lr: float = 1e-2
    leave_one_out: bool = False
    features: str = "contributions"
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.lr < 0 or self.finetune_lr < 0:
            raise ContractError("learning rates must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.metric not in cpc.METRICS:
            raise ContractError(f"unknown metric {self.metric!r}")
        if self.pairing not in cpc.PAIRINGS:
            raise ContractError(f"unknown pairing {self.pairing!r}")
        if self.use_osd and not self.use_cpc:
            raise ContractError("OSD operates on decomposed components and needs CPC")
        if self.shots < 1:
            raise ContractError("shots must be >= 1")
        if self.features not in FEATURES:
            raise ContractError(f"unknown feature source {self.features!r}")

    @property
    def variant(self):
        if not self.use_cpc:
            return "baseline"
        name = "cpc"
        if self.use_afw:
            name += "+afw"
        if self.use_osd:
            name += "+osd"
        return name


ABLATIONS = {
    "baseline": dict(use_cpc=False, use_osd=False, use_afw=False),
    "cpc": dict(use_cpc=True, use_osd=False, use_afw=False),
    "cpc+afw": dict(use_cpc=True, use_osd=False, use_afw=True),
    "cpc+osd": dict(use_cpc=True, use_osd=True, use_afw=False),
    "full": dict(use_cpc=True, use_osd=True, use_afw=True),
}


# ---------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self, grads):
        if self.lr == 0:
            return
        for p, g in zip(self.params, grads):
            p.data = (p.data - self.lr * g).astype(p.dtype)


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in params]

    def step(self, grads):
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)


def make_optimizer(name, params, lr):
    return Adam(params, lr) if name == "adam" else SGD(params, lr)


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    vit: vit.VitConfig
    train: TrainConfig
    params: dict
    step: int = 0
    history: list = field(default_factory=list, repr=False)
    skipped: int = 0

    def copy(self):
        params = {k: T.parameter(v.data.copy(), name=k) for k, v in self.params.items()}
        return Checkpoint(self.vit, self.train, params, self.step, list(self.history), self.skipped)

    def arrays(self):
        return {k: v.data for k, v in self.params.items()}

    def names(self, prefix):
        return sorted(k for k in self.params if k.startswith(prefix))


def init_checkpoint(vit_cfg, train_cfg, image_size, dtype=np.float32):
    rng = np.random.default_rng(derive_seed(train_cfg.seed, "init") % (1 << 63))
    params = vit.init_params(vit_cfg, rng, image_size, dtype=dtype)
    if train_cfg.use_osd:
        osd_params = osd.init_osd(vit_cfg.components * vit_cfg.dim, train_cfg.rank, rng, dtype)
        params.update(osd_params.as_dict())
    return Checkpoint(vit_cfg, train_cfg, params)


def _config_text(ckpt):
    lines = [f"vit.{f.name}={getattr(ckpt.vit, f.name)}" for f in fields(ckpt.vit)]
    lines += [f"train.{f.name}={getattr(ckpt.train, f.name)}" for f in fields(ckpt.train)]
    return "\n".join(lines)


def _parse_config_text(text):
    vit_kw, train_kw = {}, {}
    for line in text.splitlines():
        key, _, value = line.partition("=")
        group, _, name = key.partition(".")
        target, cls = (vit_kw, vit.VitConfig) if group == "vit" else (train_kw, TrainConfig)
        kind = {f.name: f.type for f in fields(cls)}[name]
        target[name] = _coerce(kind, value)
    return vit.VitConfig(**vit_kw), TrainConfig(**train_kw)


def _coerce(kind, value):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        return value == "True"
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


def encode_tensors(named):
    """SDRC body for an ordered {name: float array} mapping."""
    out = [SDRC_MAGIC, struct.pack("<II", SDRC_VERSION, len(named))]
    for name, arr in named.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_tensors(blob):
    if len(blob) < 4 or blob[:4] != SDRC_MAGIC:
        raise BadMagicError(f"not an SDRC file (magic {bytes(blob[:4])!r})", 0)
    if len(blob) < 12:
        raise TruncatedError("header truncated", len(blob))
    version, count = struct.unpack_from("<II", blob, 4)
    if version != SDRC_VERSION:
        raise VersionError(f"unsupported SDRC version {version}", 4)
    offset = 12
    named = {}
    for i in range(count):
        start = offset
        if offset + 2 > len(blob):
            raise TruncatedError(f"tensor {i} name length truncated", start)
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if offset + name_len + 1 > len(blob):
            raise TruncatedError(f"tensor {i} name truncated", start)
        try:
            name = bytes(blob[offset:offset + name_len]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor {i} name is not UTF-8", offset) from exc
        offset += name_len
        rank = blob[offset]
        offset += 1
        if offset + 4 * rank > len(blob):
            raise TruncatedError(f"tensor {name!r} dims truncated", start)
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        if offset + 4 * size > len(blob):
            raise TruncatedError(f"tensor {name!r} data truncated", start)
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        named[name] = data.astype(np.float32).reshape(dims)
        offset += 4 * size
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes", offset)
    return named


def save_checkpoint(ckpt, path):
    named = {k: ckpt.params[k].data for k in sorted(ckpt.params)}
    text = _config_text(ckpt).encode("utf-8")
    named[META_CONFIG] = np.frombuffer(text, dtype=np.uint8).astype(np.float32)
    named[META_STEP] = np.array([ckpt.step], dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(encode_tensors(named))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        named = decode_tensors(fh.read())
    text = named.pop(META_CONFIG, None)
    if text is None:
        raise FormatError("checkpoint lacks a config snapshot", 0)
    step = int(named.pop(META_STEP, np.zeros(1))[0])
    vit_cfg, train_cfg = _parse_config_text(bytes(text.astype(np.uint8)).decode("utf-8"))
    params = {k: T.parameter(v, name=k) for k, v in named.items()}
    return Checkpoint(vit_cfg, train_cfg, params, step)


# ---------------------------------------------------------------- pipeline


@dataclass
class EpisodeOutput:
    fused: Tensor  # (Q, 2, n, n)
    orth: Tensor | None
    stack: cpc.ScoreStack
    components: list


def component_maps(ckpt, images):
    """Per-image component features (B, d, n, n) before OSD; final output for the baseline."""
    stream = vit.encode(images, ckpt.params, ckpt.vit)
    n = ckpt.vit.patch
    if not ckpt.train.use_cpc:
        feats = [stream.final]
    elif ckpt.train.features == "contributions":
        feats = list(stream.contributions)
    else:
        feats, run = [], stream.z0
        for c in stream.contributions:
            run = run + c
            feats.append(run)
    return [f.reshape(f.shape[0], f.shape[1], n, n) for f in feats]


def _slice(t, lo, hi):
    return T.getitem(t, slice(lo, hi))


def score_episode(ckpt, components, n_support, support_masks, afw=None, query_slice=None):
    """Run OSD (if enabled), prototypes, cross comparison and fusion.

    ``components`` cover the support images first; queries are rows
    ``query_slice`` (default: everything after the supports).
    """
    cfg = ckpt.train
    n = ckpt.vit.patch
    total = components[0].shape[0]
    q_lo, q_hi = query_slice if query_slice is not None else (n_support, total)
    orth = None
    if cfg.use_osd:
        act = osd.osd_forward(osd.concat_components(components), osd.OsdParams.from_params(ckpt.params))
        components = osd.split_components(act.f_up, ckpt.vit.dim)
        f_orth = act.f_orth
        orth = osd.orth_loss(_slice(f_orth, 0, n_support))
        if (q_lo, q_hi) != (0, n_support):
            orth = orth + osd.orth_loss(_slice(f_orth, q_lo, q_hi))
        else:
            orth = orth * 2.0
    masks = np.stack([cpc.downsample_mask(m, n) for m in support_masks])
    protos = cpc.map_prototypes([_slice(c, 0, n_support) for c in components], masks)
    queries = [_slice(c, q_lo, q_hi) for c in components]
    stack = cpc.cross_compare(queries, protos, cfg.metric, cfg.pairing)
    if afw is not None:
        fused = fusion.fuse_afw(stack, afw)
    else:
        fused = fusion.fuse_source(stack)
    return EpisodeOutput(fused, orth, stack, components)


def episode_loss(ckpt, out, query_masks):
    h, w = query_masks.shape[-2:]
    pred = fusion.predict(out.fused, h, w, ckpt.train.temperature)
    bce = fusion.bce_loss(pred.probs, query_masks)
    if out.orth is None:
        return bce, bce, None, pred
    return fusion.total_loss(bce, out.orth, ckpt.train.lam), bce, out.orth, pred


def _source_trainable(ckpt):
    # AFW never trains on the source domain
    return [k for k in sorted(ckpt.params) if not k.startswith("afw.")]


def train_source(config, dataset, vit_cfg, image_size=None, ckpt=None, log_every=0):
    """Episodic training on the source domain. Returns the trained checkpoint.

    ``history`` holds (episode, total, bce, orth) per completed step; episodes
    whose support mask degenerates at token resolution are skipped and counted.
    """
    if len(dataset) == 0:
        raise ContractError("source dataset is empty")
    image_size = image_size or dataset.records[0].mask.shape
    ckpt = ckpt or init_checkpoint(vit_cfg, config, image_size)
    names = _source_trainable(ckpt)
    params = [ckpt.params[k] for k in names]
    opt = make_optimizer(config.optimizer, params, config.lr)
    for i in range(config.episodes):
        seed = derive_seed(config.seed, "train", i)
        ep = sample_episode(dataset, config.shots, seed)
        s_img, s_mask = ep.support_arrays()
        images = np.concatenate([s_img, ep.query[0][None]])
        try:
            comps = component_maps(ckpt, images)
            out = score_episode(ckpt, comps, config.shots, s_mask)
        except DegenerateInputError as exc:
            ckpt.skipped += 1
            log.debug("skipping episode %d: %s", i, exc)
            continue
        loss, bce, orth, _ = episode_loss(ckpt, out, ep.query[1][None])
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"non-finite loss at episode {i} (seed {seed})")
        grads = T.backward(loss, params)
        opt.step(grads)
        ckpt.step += 1
        ckpt.history.append((i, float(loss.data), float(bce.data),
                             None if orth is None else float(orth.data)))
        if log_every and (i + 1) % log_every == 0:
            recent = [h[2] for h in ckpt.history[-log_every:]]
            log.info("episode %d  bce %.4f", i + 1, float(np.mean(recent)))
    if ckpt.skipped:
        log.info("skipped %d degenerate episodes", ckpt.skipped)
    return ckpt


def target_trainable(ckpt):
    names = []
    if ckpt.train.use_osd:
        names.extend(osd.TARGET_TRAINABLE)
    if ckpt.train.use_afw:
        names.append(fusion.AFW)
    return names


def finetune_target(ckpt, support_images, support_masks, steps=None, lr=None, components=None):
    """Adapt w_orth and AFW on the support set alone, using the supports as queries.

    Returns a new checkpoint; the encoder, w_in and w_out are left bit-identical.
    """
    cfg = ckpt.train
    steps = cfg.finetune_steps if steps is None else steps
    lr = cfg.finetune_lr if lr is None else lr
    support_images = np.asarray(support_images)
    support_masks = np.asarray(support_masks)
    k = len(support_images)
    if k < 1:
        raise ContractError("finetuning needs at least one support")
    adapted = ckpt.copy()
    if cfg.use_afw:
        comps_count = ckpt.vit.components if cfg.use_cpc else 1
        pairs = comps_count * comps_count if cfg.pairing == "cross" else comps_count
        adapted.params[fusion.AFW] = T.parameter(np.ones((pairs, 2), dtype=np.float32), fusion.AFW)
    names = target_trainable(adapted)
    if steps == 0 or not names:
        return adapted
    if components is None:
        components = [c.detach() for c in component_maps(adapted, support_images)]
    params = [adapted.params[n] for n in names]
    opt = make_optimizer("adam", params, lr)
    afw = adapted.params.get(fusion.AFW)
    for _ in range(steps):
        if cfg.leave_one_out and k > 1:
            loss = None
            for q in range(k):
                keep = [i for i in range(k) if i != q]
                sub = [T.getitem(c, np.array(keep + [q])) for c in components]
                out = score_episode(adapted, sub, k - 1, support_masks[keep], afw, (k - 1, k))
                term, _, _, _ = episode_loss(adapted, out, support_masks[q][None])
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / k)
        else:
            out = score_episode(adapted, components, k, support_masks, afw, (0, k))
            loss, _, _, _ = episode_loss(adapted, out, support_masks)
        grads = T.backward(loss, params)
        opt.step(grads)
    return adapted


class Segmenter:
    """Episode-level predictor wrapping a checkpoint."""

    def __init__(self, ckpt, finetune=True):
        self.ckpt = ckpt
        self.finetune = finetune

    def segment(self, episode):
        s_img, s_mask = episode.support_arrays()
        q_img, _ = episode.query
        ckpt = self.ckpt
        images = np.concatenate([s_img, q_img[None]])
        comps = [c.detach() for c in component_maps(ckpt, images)]
        k = len(s_img)
        afw = None
        if self.finetune and (target_trainable(ckpt) or ckpt.train.use_afw):
            sup = [T.getitem(c, slice(0, k)) for c in comps]
            ckpt = finetune_target(ckpt, s_img, s_mask, components=sup)
            afw = ckpt.params.get(fusion.AFW)
        elif ckpt.train.use_afw and fusion.AFW in ckpt.params:
            afw = ckpt.params[fusion.AFW]
        out = score_episode(ckpt, comps, k, s_mask, afw)
        h, w = q_img.shape[-2:]
        return fusion.predict(out.fused, h, w, ckpt.train.temperature).labels[0]


def evaluate(model, episodes, finetune=True):
    """Mean IoU over episodes; failing episodes are recorded as skipped with a reason."""
    if not episodes:
        raise ContractError("evaluate needs at least one episode")
    segmenter = model if hasattr(model, "segment") else Segmenter(model, finetune)
    per_episode = []
    scores = []
    for idx, ep in enumerate(episodes):
        try:
            labels = segmenter.segment(ep)
        except (DegenerateInputError, ContractError) as exc:
            per_episode.append({"episode": idx, "class_id": ep.class_id, "skipped": str(exc)})
            continue
        score = fusion.miou(labels, ep.query[1])
        scores.append(score["mean"])
        per_episode.append({"episode": idx, "class_id": ep.class_id, **score})
    mean = float(np.mean(scores)) if scores else float("nan")
    return {"mean_iou": mean, "evaluated": len(scores), "per_episode": per_episode}


def with_variant(config, name):
    return replace(config, **ABLATIONS[name])


def config_dict(config):
    return asdict(config)
