"""End-to-end experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from . import analysis, osd, trainer, vit
from .episodes import derive_seed, episode_seeds, generate_domain, render_sample, sample_episode
from .tensor import Tensor


def domains(cfg):
    """(source, target) datasets for an ExperimentConfig."""
    source = generate_domain(cfg.domain("source"), cfg.source_classes, cfg.source_samples)
    target = generate_domain(cfg.domain("target"), cfg.target_classes, cfg.target_samples)
    return source, target


def variant(cfg, name):
    """The config with one ablation row's module toggles applied."""
    toggles = trainer.ABLATIONS[name]
    return replace(cfg, **toggles)


def train(cfg, source):
    image = (cfg.image_size, cfg.image_size)
    return trainer.train_source(cfg.train(), source, cfg.vit(), image_size=image)


def target_episodes(cfg, target, count=None):
    count = cfg.eval_episodes if count is None else count
    return [sample_episode(target, cfg.shots, s)
            for s in episode_seeds(cfg.episode_seed(), count)]


def ablation(cfg, names=None, source=None, target=None, log=None, cache=None):
    """Train and evaluate each ablation row on the same episodes.

    Returns {name: evaluate() result plus ``seconds``}. ``cache`` maps
    (use_cpc, use_osd) to trained checkpoints and is filled in as rows train.
    """
    names = list(names or trainer.ABLATIONS)
    if source is None or target is None:
        source, target = domains(cfg)
    episodes = target_episodes(cfg, target)
    results = {}
    # AFW never trains on the source, so rows differing only in AFW share weights
    trained = {} if cache is None else cache
    for name in names:
        start = time.perf_counter()
        run = variant(cfg, name)
        key = (run.use_cpc, run.use_osd)
        if key not in trained:
            trained[key] = train(run, source)
        ckpt = trained[key].copy()
        ckpt.train = run.train()
        res = trainer.evaluate(ckpt, episodes, finetune=True)
        res["seconds"] = time.perf_counter() - start
        results[name] = res
        if log:
            log(f"{name:10s} mIoU {100 * res['mean_iou']:.2f}  ({res['seconds']:.1f}s)")
    return results


def paired_images(cfg, count):
    """The same objects rendered under source and target statistics.

    Returns two (count, C, h, w) arrays whose rows depict identical geometry,
    so CKA rows pair up image by image.
    """
    src_spec = cfg.domain("source")
    tgt_spec = replace(cfg.domain("target"), seed=src_spec.seed,
                       class_offset=src_spec.class_offset)
    src, tgt = [], []
    rng_seed = derive_seed(cfg.seed, "paired")
    for i in range(count):
        class_id = src_spec.class_offset + (i % cfg.source_classes)
        index = 1000 + i + (rng_seed % 997)
        src.append(render_sample(src_spec, class_id, index)[0])
        tgt.append(render_sample(tgt_spec, class_id, index)[0])
    return np.stack(src), np.stack(tgt)


def cka_study(ckpt, source_images, target_images, k=None):
    """Layer-pair CKA matrix between source and target streams, with aggregates."""
    s_stream = vit.encode(source_images, ckpt.params, ckpt.vit)
    t_stream = vit.encode(target_images, ckpt.params, ckpt.vit)
    matrix = analysis.layer_pair_cka([s_stream], [t_stream])
    matrix.row_domain, matrix.col_domain = "source", "target"
    final = analysis.final_output_cka([s_stream], [t_stream])
    k = k or len(matrix.values)
    analysis.cka_aggregates(matrix, final, k)
    return matrix


def compared_components(ckpt, images):
    """The per-component features CPC compares (after OSD when enabled), B×d×n×n each."""
    comps = [c.detach() for c in trainer.component_maps(ckpt, images)]
    if not ckpt.train.use_osd:
        return comps
    act = osd.osd_forward(osd.concat_components(comps), osd.OsdParams.from_params(ckpt.params))
    return osd.split_components(act.f_up, ckpt.vit.dim)


def mi_study(ckpt, images, bins=8):
    comps = compared_components(ckpt, images)
    flat = [np.asarray(c.data if isinstance(c, Tensor) else c).reshape(c.shape[0], c.shape[1], -1)
            for c in comps]
    return analysis.component_mi(flat, bins)
