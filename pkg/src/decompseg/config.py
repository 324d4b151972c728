"""Flat ``key=value`` experiment configuration.

One key per line, ``#`` starts a comment, blank lines are ignored. Unknown keys
and unparseable values are errors; a repeated key keeps the last value and
warns. Precedence when composing: defaults < config file < ``--set`` flags.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields, replace

from .episodes import DomainSpec, derive_seed
from .errors import ConfigError
from .trainer import TrainConfig
from .vit import VitConfig


def _f(default, doc, key=None):
    meta = {"doc": doc}
    if key:
        meta["key"] = key
    return field(default=default, metadata=meta)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = _f(0, "top-level seed; every other seed is derived from it unless set")
    # encoder
    layers: int = _f(4, "transformer blocks L")
    dim: int = _f(32, "channel width d")
    patch: int = _f(8, "tokens per side n (N = n^2)")
    heads: int = _f(2, "attention heads")
    mlp_ratio: int = _f(2, "MLP hidden expansion")
    granularity: str = _f("per-block", "per-block | per-sublayer")
    norm_mode: str = _f("norm-free", "norm-free | pre-norm")
    channels: int = _f(1, "image channels C")
    image_size: int = _f(32, "square image extent in pixels")
    # decoupling and comparison
    rank: int = _f(8, "OSD bottleneck rank r")
    lam: float = _f(0.1, "orthogonal loss weight", key="lambda")
    metric: str = _f("cosine", "cosine | euclidean | dot")
    pairing: str = _f("cross", "cross (L^2 pairs) | positionwise (L diagonal pairs)")
    temperature: float = _f(10.0, "score scale before the two-class softmax")
    use_cpc: bool = _f(True, "compare decomposed components (false: final-output baseline)")
    use_osd: bool = _f(True, "orthogonal space decoupling")
    use_afw: bool = _f(True, "adaptive fusion weights during target finetuning")
    features: str = _f("contributions", "CPC features: contributions (Layer^l) | hidden (Z^l)")
    # optimization
    optimizer: str = _f("adam", "sgd | adam")
    lr: float = _f(1e-3, "source learning rate")
    episodes: int = _f(1500, "source training episodes")
    shots: int = _f(1, "support shots K")
    finetune_steps: int = _f(50, "target finetuning steps per episode")
    finetune_lr: float = _f(1e-2, "target finetuning learning rate (w_orth, AFW)")
    leave_one_out: bool = _f(False, "K>=2: finetune with leave-one-out pseudo-queries")
    eval_episodes: int = _f(100, "target evaluation episodes")
    # synthetic domains
    source_classes: int = _f(16, "source classes")
    source_samples: int = _f(12, "samples per source class")
    source_texture_offset: float = _f(0.0, "source texture frequency shift (cycles/px)")
    source_palette_rotation: float = _f(0.0, "source palette rotation")
    source_background_hue: float = _f(0.1, "source background hue")
    source_clutter: float = _f(0.2, "source clutter density")
    target_classes: int = _f(16, "target classes")
    target_samples: int = _f(12, "samples per target class")
    target_texture_offset: float = _f(0.0, "target texture frequency shift (cycles/px)")
    target_palette_rotation: float = _f(0.0, "target palette rotation")
    target_background_hue: float = _f(0.1, "target background hue")
    target_clutter: float = _f(1.5, "target clutter density")
    target_class_offset: int = _f(1000, "first target class id (keeps label sets disjoint)")
    # paths
    source_data: str = _f("source.epds", "source EPDS file")
    target_data: str = _f("target.epds", "target EPDS file")
    checkpoint: str = _f("model.sdrc", "checkpoint file")

    # derived views --------------------------------------------------------
    def vit(self):
        return VitConfig(layers=self.layers, dim=self.dim, patch=self.patch, heads=self.heads,
                         mlp_ratio=self.mlp_ratio, granularity=self.granularity,
                         norm_mode=self.norm_mode, channels=self.channels)

    def train(self):
        return TrainConfig(episodes=self.episodes, lr=self.lr, optimizer=self.optimizer,
                           lam=self.lam, shots=self.shots, metric=self.metric,
                           pairing=self.pairing, use_cpc=self.use_cpc, use_osd=self.use_osd,
                           use_afw=self.use_afw, rank=self.rank, temperature=self.temperature,
                           finetune_steps=self.finetune_steps, finetune_lr=self.finetune_lr,
                           leave_one_out=self.leave_one_out,
                           features=self.features, seed=derive_seed(self.seed, "train"))

    def domain(self, which):
        if which not in ("source", "target"):
            raise ConfigError(f"unknown domain {which!r}")
        get = lambda name: getattr(self, f"{which}_{name}")  # noqa: E731
        return DomainSpec(
            seed=derive_seed(self.seed, "domain", which),
            image_size=(self.image_size, self.image_size),
            channels=self.channels,
            class_offset=0 if which == "source" else self.target_class_offset,
            texture_offset=get("texture_offset"),
            palette_rotation=get("palette_rotation"),
            background_hue=get("background_hue"),
            clutter_density=get("clutter"),
        )

    def episode_seed(self):
        return derive_seed(self.seed, "eval")

    def as_dict(self):
        return {key_of(f): getattr(self, f.name) for f in fields(self)}


def key_of(f):
    return f.metadata.get("key", f.name)


_FIELDS = {key_of(f): f for f in fields(ExperimentConfig)}


def keys():
    return list(_FIELDS)


def documentation():
    lines = []
    for key, f in _FIELDS.items():
        lines.append(f"{key}={format_value(f.default)}  # {f.metadata['doc']}")
    return "\n".join(lines)


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key, raw, line=None):
    f = _FIELDS.get(key)
    if f is None:
        raise ConfigError("unknown key", key=key, line=line)
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {kind}", key=key, line=line) from exc
    return raw


def parse_pairs(text):
    """Yield (key, value, line) with values typed; duplicates warn, last wins."""
    seen = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError("expected key=value", line=lineno)
        key, _, raw = stripped.partition("=")
        key = key.strip()
        value = parse_value(key, raw, lineno)
        if key in seen:
            warnings.warn(f"config key {key!r} repeated on line {lineno}; last value wins",
                          stacklevel=2)
        seen[key] = value
    return seen


def parse_config(text, base=None):
    values = parse_pairs(text)
    return apply_overrides(base or ExperimentConfig(), values)


def apply_overrides(config, values):
    kwargs = {_FIELDS[key].name: value for key, value in values.items()}
    return replace(config, **kwargs)


def parse_set_flags(items):
    values = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, raw = item.partition("=")
        values[key.strip()] = parse_value(key.strip(), raw)
    return values


def render(config):
    return "".join(f"{key}={format_value(value)}\n" for key, value in config.as_dict().items())
