"""``decompseg`` command line.

Every subcommand accepts ``--config``, ``--set KEY=VALUE`` (repeatable),
``--seed`` and ``--out``; relative data and checkpoint paths resolve against
the output directory. Each run writes one ``<command>.json`` that embeds the
effective config, so a result can be reproduced from its JSON alone.
Exit status: 0 success, 1 usage error, 2 data or contract error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
from dataclasses import replace

import numpy as np

from . import __version__, config, experiments, fusion, trainer, vit
from .episodes import episode_seeds, generate_domain, read_dataset, sample_episode, write_dataset
from .errors import DecompsegError

log = logging.getLogger("decompseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(sub=False):
    # subcommand copies default to SUPPRESS so they never clobber flags given
    # before the subcommand name
    common = argparse.ArgumentParser(add_help=False)
    dflt = (lambda value: argparse.SUPPRESS) if sub else (lambda value: value)
    common.add_argument("--config", metavar="PATH", default=dflt(None),
                        help="key=value config file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=dflt([]),
                        dest="overrides_sub" if sub else "overrides",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, default=dflt(None),
                        help="top-level seed (same as --set seed=N)")
    common.add_argument("--out", metavar="DIR", default=dflt("."), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=dflt(False))
    return common


def build_parser():
    parser = _Parser(prog="decompseg", parents=[_common()],
                     description="Residual-stream decomposition for cross-domain few-shot "
                                 "segmentation on a synthetic benchmark.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    common = _common(sub=True)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic domain to EPDS")
    p.add_argument("--domain", choices=("source", "target"), default="source")
    p.add_argument("--paired", action="store_true",
                   help="target statistics over the source geometry (row-paired for CKA)")
    p.add_argument("--path", help="output file (default: source_data / target_data)")

    p = sub.add_parser("train", parents=[common], help="episodic source training")
    p.add_argument("--data", help="source EPDS (default: source_data)")
    p.add_argument("--checkpoint", help="output checkpoint (default: checkpoint)")

    p = sub.add_parser("finetune-eval", parents=[common],
                       help="finetune per episode on the target supports and score mIoU")
    p.add_argument("--data", help="target EPDS (default: target_data)")
    p.add_argument("--checkpoint", help="trained checkpoint (default: checkpoint)")
    p.add_argument("--no-finetune", action="store_true", help="evaluate the zero-step model")

    p = sub.add_parser("analyze-cka", parents=[common],
                       help="layer-pair CKA between two datasets (rows paired by index)")
    p.add_argument("--source", required=True, help="first EPDS file")
    p.add_argument("--target", required=True, help="second EPDS file")
    p.add_argument("--checkpoint", help="trained checkpoint (default: checkpoint)")
    p.add_argument("--limit", type=int, default=64, help="images used per side")
    p.add_argument("-k", type=int, help="top/bottom-k size (default: L)")

    p = sub.add_parser("decompose", parents=[common],
                       help="per-component contribution norms for one image")
    p.add_argument("--data", help="EPDS file (default: target_data)")
    p.add_argument("--index", type=int, default=0, help="record index")
    p.add_argument("--checkpoint", help="trained checkpoint (default: checkpoint)")

    p = sub.add_parser("export-heatmap", parents=[common],
                       help="per-pair score maps and fusion weights for one episode")
    p.add_argument("--data", help="target EPDS (default: target_data)")
    p.add_argument("--checkpoint", help="trained checkpoint (default: checkpoint)")
    p.add_argument("--episode", type=int, default=0, help="evaluation episode number")

    p = sub.add_parser("ablate", parents=[common],
                       help="generate, train and evaluate every ablation row")
    p.add_argument("--variants", default=",".join(trainer.ABLATIONS),
                   help="comma-separated subset of " + ", ".join(trainer.ABLATIONS))

    sub.add_parser("show-config", parents=[common], help="print the effective config")
    return parser


# ---------------------------------------------------------------- plumbing


def effective_config(args):
    cfg = config.ExperimentConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = config.parse_config(fh.read(), cfg)
    flags = list(args.overrides) + list(getattr(args, "overrides_sub", []))
    cfg = config.apply_overrides(cfg, config.parse_set_flags(flags))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def versions():
    import numba

    return {"decompseg": __version__, "numpy": np.__version__, "numba": numba.__version__,
            "python": platform.python_version()}


class Writer:
    """Single funnel for every file a run produces."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.written = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        return name if os.path.isabs(name) else os.path.join(self.out_dir, name)

    def text(self, name, content):
        path = self.path(name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(content)
        self.written.append(path)
        return path

    def csv(self, name, header, rows):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(header)
        writer.writerows(rows)
        return self.text(name, buf.getvalue())

    def results(self, command, cfg, payload):
        doc = {"command": command, "seed": cfg.seed, "config": cfg.as_dict(),
               "versions": versions(), **payload}
        return self.text(f"{command}.json", json.dumps(doc, indent=2, sort_keys=False) + "\n")


def _load_ckpt(writer, args, cfg):
    return trainer.load_checkpoint(writer.path(args.checkpoint or cfg.checkpoint))


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg, writer):
    spec = cfg.domain(args.domain)
    classes, samples = cfg.source_classes, cfg.source_samples
    if args.domain == "target" and not args.paired:
        classes, samples = cfg.target_classes, cfg.target_samples
    if args.paired:
        if args.domain != "target":
            raise UsageError("--paired only applies to --domain target")
        src = cfg.domain("source")
        spec = replace(spec, seed=src.seed, class_offset=src.class_offset)
    dataset = generate_domain(spec, classes, samples)
    default = cfg.source_data if args.domain == "source" else cfg.target_data
    path = writer.path(args.path or default)
    write_dataset(dataset, path)
    writer.written.append(path)
    writer.results("gen-data", cfg, {"domain": args.domain, "paired": args.paired,
                                     "path": path, "records": len(dataset),
                                     "class_ids": dataset.class_ids()})
    return 0


def cmd_train(args, cfg, writer):
    dataset = read_dataset(writer.path(args.data or cfg.source_data))
    ckpt = trainer.train_source(cfg.train(), dataset, cfg.vit(), log_every=100)
    path = writer.path(args.checkpoint or cfg.checkpoint)
    trainer.save_checkpoint(ckpt, path)
    writer.written.append(path)
    writer.csv("train_history.csv", ["episode", "loss", "bce", "orth"],
               [[i, repr(t), repr(b), "" if o is None else repr(o)] for i, t, b, o in ckpt.history])
    bce = [h[2] for h in ckpt.history]
    writer.results("train", cfg, {"checkpoint": path, "steps": ckpt.step,
                                  "skipped": ckpt.skipped,
                                  "bce_first10": float(np.mean(bce[:10])) if bce else None,
                                  "bce_last10": float(np.mean(bce[-10:])) if bce else None})
    return 0


def _with_run_config(ckpt, cfg):
    """Finetuning knobs come from the effective config; module toggles from the checkpoint."""
    tc = cfg.train()
    ckpt.train = replace(ckpt.train, finetune_steps=tc.finetune_steps,
                         finetune_lr=tc.finetune_lr, leave_one_out=tc.leave_one_out,
                         temperature=tc.temperature)
    return ckpt


def cmd_finetune_eval(args, cfg, writer):
    dataset = read_dataset(writer.path(args.data or cfg.target_data))
    ckpt = _with_run_config(_load_ckpt(writer, args, cfg), cfg)
    episodes = experiments.target_episodes(cfg, dataset)
    res = trainer.evaluate(ckpt, episodes, finetune=not args.no_finetune)
    rows = []
    for rec in res["per_episode"]:
        rows.append([rec["episode"], rec["class_id"], repr(rec.get("iou_fg", "")),
                     repr(rec.get("iou_bg", "")), repr(rec.get("mean", "")), rec.get("skipped", "")])
    writer.csv("per_episode.csv", ["episode", "class_id", "iou_fg", "iou_bg", "mean_iou", "skipped"],
               rows)
    writer.results("finetune-eval", cfg, {"variant": ckpt.train.variant, "finetune": not args.no_finetune,
                                          **res})
    log.info("mean IoU %.2f over %d episodes", 100 * res["mean_iou"], res["evaluated"])
    return 0


def cmd_analyze_cka(args, cfg, writer):
    a = read_dataset(writer.path(args.source))
    b = read_dataset(writer.path(args.target))
    m = min(len(a), len(b), args.limit)
    if m < 2:
        raise DecompsegError("CKA needs at least two paired images")
    ckpt = _load_ckpt(writer, args, cfg)
    xs = np.stack([r.image for r in a.records[:m]])
    ys = np.stack([r.image for r in b.records[:m]])
    matrix = experiments.cka_study(ckpt, xs, ys, k=args.k)
    matrix.row_domain, matrix.col_domain = os.path.basename(args.source), os.path.basename(args.target)
    writer.text("cka.csv", matrix.to_csv())
    writer.results("analyze-cka", cfg, {"images": m, "matrix": matrix.values.tolist(),
                                        "aggregates": matrix.aggregates})
    return 0


def cmd_decompose(args, cfg, writer):
    dataset = read_dataset(writer.path(args.data or cfg.target_data))
    if not 0 <= args.index < len(dataset):
        raise DecompsegError(f"record index {args.index} out of range (0..{len(dataset) - 1})")
    ckpt = _load_ckpt(writer, args, cfg)
    rec = dataset.records[args.index]
    stream = vit.encode(rec.image[None], ckpt.params, ckpt.vit)
    comps = vit.decompose(stream)
    final = np.asarray(stream.final.data)[0]
    rows, norms = [], []
    per = "msa_mlp" if ckpt.vit.granularity == vit.PER_SUBLAYER else "layer"
    for idx, comp in enumerate(comps):
        data = np.asarray(comp.data)[0]
        if idx == 0:
            label = "z0"
        elif per == "layer":
            label = f"layer{idx}"
        else:
            label = f"{'msa' if idx % 2 else 'mlp'}{(idx + 1) // 2}"
        share = float(np.sum(data * final) / np.sum(final * final))
        norm = float(np.linalg.norm(data))
        norms.append(norm)
        rows.append([idx, label, repr(norm), repr(float(np.linalg.norm(data, axis=0).mean())),
                     repr(share)])
    writer.csv("components.csv",
               ["component", "label", "frobenius_norm", "mean_token_norm", "projection_share"], rows)
    writer.results("decompose", cfg, {"record": args.index, "class_id": rec.class_id,
                                      "norms": norms})
    return 0


def cmd_export_heatmap(args, cfg, writer):
    dataset = read_dataset(writer.path(args.data or cfg.target_data))
    ckpt = _with_run_config(_load_ckpt(writer, args, cfg), cfg)
    seed = episode_seeds(cfg.episode_seed(), args.episode + 1)[args.episode]
    ep = sample_episode(dataset, cfg.shots, seed)
    s_img, s_mask = ep.support_arrays()
    images = np.concatenate([s_img, ep.query[0][None]])
    comps = [c.detach() for c in trainer.component_maps(ckpt, images)]
    k = len(s_img)
    afw = None
    if ckpt.train.use_afw:
        adapted = trainer.finetune_target(ckpt, s_img, s_mask,
                                          components=[c[0:k] for c in comps])
        afw = adapted.params[fusion.AFW]
        ckpt = adapted
    out = trainer.score_episode(ckpt, comps, k, s_mask, afw)
    stack = out.stack
    single = type(stack)(maps=stack.maps[0], metric=stack.metric, components=stack.components,
                         pairing=stack.pairing)
    writer.text("heatmap.csv", single.to_csv())
    payload = {"episode": args.episode, "class_id": ep.class_id, "pairs": stack.pairs}
    if afw is not None:
        writer.text("afw.csv", fusion.FusionWeights(afw).to_csv())
        payload["afw"] = np.asarray(afw.data).tolist()
    pred = fusion.predict(out.fused, *ep.query[1].shape, ckpt.train.temperature).labels[0]
    payload["miou"] = fusion.miou(pred, ep.query[1])
    writer.results("export-heatmap", cfg, payload)
    return 0


def cmd_ablate(args, cfg, writer):
    names = [n.strip() for n in args.variants.split(",") if n.strip()]
    unknown = [n for n in names if n not in trainer.ABLATIONS]
    if unknown:
        raise UsageError(f"unknown variants: {', '.join(unknown)}")
    results = experiments.ablation(cfg, names, log=log.info)
    base = results.get("baseline", {}).get("mean_iou")
    rows = []
    for name, res in results.items():
        delta = "" if base is None else repr(100 * (res["mean_iou"] - base))
        rows.append([name, repr(100 * res["mean_iou"]), delta, res["evaluated"],
                     repr(res["seconds"])])
    writer.csv("ablation.csv", ["variant", "miou_points", "delta_vs_baseline", "episodes", "seconds"],
               rows)
    summary = {name: {"mean_iou": r["mean_iou"], "evaluated": r["evaluated"],
                      "seconds": r["seconds"]} for name, r in results.items()}
    writer.results("ablate", cfg, {"results": summary})
    return 0


def cmd_show_config(args, cfg, writer):
    sys.stdout.write(config.render(cfg))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune-eval": cmd_finetune_eval,
    "analyze-cka": cmd_analyze_cka,
    "decompose": cmd_decompose,
    "export-heatmap": cmd_export_heatmap,
    "ablate": cmd_ablate,
    "show-config": cmd_show_config,
}


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        cfg = effective_config(args)
        return COMMANDS[args.command](args, cfg, Writer(args.out))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DecompsegError, OSError) as exc:
        print(f"decompseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
