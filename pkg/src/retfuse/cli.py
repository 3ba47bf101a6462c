"""Command-line entry point: ``retfuse <command> ...``.

Datasets are given either as a JSON-lines manifest (see ``data_io.read_manifest``)
or as ``synthetic:N[:SEED]`` for generated pairs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data_io, metrics, training
from .checkpoint import load_checkpoint, save_checkpoint
from .config import VARIANTS, TrainConfig, load_config
from .vessel_graph import graph_from_mask, segment_vessels

log = logging.getLogger("retfuse")


def load_dataset(spec: str) -> list:
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        n = int(parts[1])
        seed = int(parts[2]) if len(parts) > 2 else 0
        return data_io.synthetic_dataset(n, seed=seed)
    return list(data_io.read_manifest(spec))


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "toy", False):
        d = cfg.to_dict()
        d["toy_mode"] = True
        cfg = TrainConfig.from_dict(d)
    return cfg


# ---------------------------------------------------------------- commands

def cmd_graph_extract(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.mask or args.image:
        if args.mask:
            mask = data_io.read_mask(args.mask)
        else:
            mask = segment_vessels(data_io.read_image(args.image)[0])
        g = graph_from_mask(mask)
        name = Path(args.mask or args.image).stem
        g.save(out_dir / f"{name}.graph.json")
        print(f"{name}: {g.num_nodes} nodes, {g.num_edges} edges")
        return 0
    if not args.data:
        raise SystemExit("graph-extract needs --data, --mask or --image")
    cfg = _config(args)
    cache = training.GraphCache(out_dir)
    for pair in load_dataset(args.data):
        item = training.prepare_pair(pair, cfg.input_size, cache)
        print(f"{pair.id}: {item.graph1.num_nodes}/{item.graph1.num_edges} and "
              f"{item.graph2.num_nodes}/{item.graph2.num_edges} nodes/edges")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        d = cfg.to_dict()
        d["seed"] = args.seed
        cfg = TrainConfig.from_dict(d)
    data = training.prepare_dataset(load_dataset(args.data), cfg,
                                    training.GraphCache(args.graph_cache) if args.graph_cache else None)
    try:
        if args.stage == 1:
            res = training.train_stage1(data, cfg, args.log, progress=True)
        else:
            if not args.init:
                raise SystemExit("stage 2 needs --init with a stage-1 checkpoint")
            res = training.train_stage2(data, cfg, load_checkpoint(args.init, expect=cfg),
                                        args.log, progress=True)
    except training.TrainingAborted as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, args.out)
        log.error("%s; last finite state saved to %s", exc, args.out)
        return 2
    save_checkpoint(res.checkpoint, args.out)
    totals = res.totals
    print(f"stage {args.stage}: {len(totals)} steps, final loss {totals[-1]:.4f} -> {args.out}")
    return 0


def cmd_fuse(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    masks = tuple(args.masks) if args.masks else None
    pair = data_io.load_pair(args.pair, masks)
    model = training.model_from_checkpoint(ckpt)
    out = training.fuse(pair, ckpt, model=model)
    data_io.write_image(args.out, out.fused, out.chroma)
    if args.dump_attention:
        item = training.prepare_pair(pair, ckpt.config.input_size)
        Path(args.dump_attention).write_text(json.dumps(training.attention_maps(model, item)))
    print(" ".join(f"{c}={v:.4f}" for c, v in zip(metrics.COLUMNS, out.report.row())))
    return 0


def cmd_evaluate(args) -> int:
    """Score ``<id>_fused.png`` (or the naive average) for every pair in ``DIR/manifest.jsonl``."""
    root = Path(args.dir)
    names, triples = [], []
    for pair in data_io.read_manifest(root / args.manifest):
        if args.baseline == "average":
            fused = training.naive_average(pair)
        else:
            path = root / f"{pair.id}{args.suffix}"
            if not path.exists():
                log.error("missing fused image %s", path)
                return 1
            fused = data_io.read_image(path)[0]
            if fused.shape != pair.shape:
                log.error("%s is %s, sources are %s", path, fused.shape, pair.shape)
                return 1
        names.append(pair.id)
        triples.append((fused, pair.image1, pair.image2))
    reports = metrics.evaluate_batch(triples, workers=args.workers)
    out = Path(args.out) if args.out else root / "metrics.csv"
    metrics.write_csv(out, names, reports)
    mean = metrics.mean_report(reports)
    print(" ".join(f"{c}={v:.4f}" for c, v in zip(metrics.COLUMNS, mean.row())))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise SystemExit(f"unknown variants {bad}; choose from {','.join(VARIANTS)}")
    rows = training.run_ablation(load_dataset(args.data), load_dataset(args.eval_data), cfg,
                                 variants, args.log, progress=True)
    table = training.format_ablation(rows)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retfuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("graph-extract", help="segment vessels and cache their graphs")
    g.add_argument("--data", help="manifest path or synthetic:N[:SEED]")
    g.add_argument("--mask", help="single binary mask to convert")
    g.add_argument("--image", help="single image to segment and convert")
    g.add_argument("--config", help="YAML training config (sets the graph resolution)")
    g.add_argument("--toy", action="store_true", help="apply the desk-scale preset")
    g.add_argument("--out", default="graphs", help="output directory (default: %(default)s)")
    g.set_defaults(func=cmd_graph_extract)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config", help="YAML training config")
    t.add_argument("--toy", action="store_true", help="apply the desk-scale preset")
    t.add_argument("--data", required=True, help="manifest path or synthetic:N[:SEED]")
    t.add_argument("--init", help="stage-1 checkpoint (stage 2 only)")
    t.add_argument("--out", required=True, help="checkpoint to write")
    t.add_argument("--log", help="JSON-lines training log")
    t.add_argument("--graph-cache", help="directory for cached graphs")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="fuse one registered pair")
    f.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    f.add_argument("--pair", nargs=2, required=True, metavar=("IMAGE1", "IMAGE2"))
    f.add_argument("--masks", nargs=2, metavar=("MASK1", "MASK2"), help="vessel masks (default: segment)")
    f.add_argument("--out", default="fused.png", help="fused image (default: %(default)s)")
    f.add_argument("--dump-attention", metavar="JSON", help="write attention coefficients")
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("evaluate", help="score fused images against their sources")
    e.add_argument("--dir", required=True, help="directory holding the manifest and fused images")
    e.add_argument("--manifest", default="manifest.jsonl", help="manifest name inside DIR")
    e.add_argument("--suffix", default="_fused.png", help="fused image is <id><suffix>")
    e.add_argument("--baseline", choices=("average",), help="score the naive average instead")
    e.add_argument("--workers", type=int, default=1, help="parallel metric processes")
    e.add_argument("--out", help="CSV path (default DIR/metrics.csv)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and compare ablation variants")
    a.add_argument("--variants", default=",".join(VARIANTS), help="comma list from I..V")
    a.add_argument("--config", help="YAML training config")
    a.add_argument("--toy", action="store_true", help="apply the desk-scale preset")
    a.add_argument("--data", default="synthetic:8", help="training pairs (default: %(default)s)")
    a.add_argument("--eval-data", default="synthetic:4:100", help="evaluation pairs (default: %(default)s)")
    a.add_argument("--log", help="JSON-lines training log")
    a.add_argument("--out", help="write the table here as well as stdout")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
