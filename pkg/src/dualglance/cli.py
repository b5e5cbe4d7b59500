"""Command line entry point: ``dualglance {train,eval,sweep,synth,inspect}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .harness import (
    evaluate_run,
    load_checkpoint,
    load_run_data,
    sweep,
    train,
    train_stage1,
    train_stage2,
    write_attention,
)
from .synthetic import SyntheticSpec, generate_synthetic, write_synthetic

LOSS_FLAGS = {"ce": "cross_entropy", "fl": "focal", "kl": "kl_divergence", "adafl": "adaptive_focal"}


def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run configuration JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded, bitwise reproducible execution")
    p.add_argument("--tau-u", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--loss", choices=sorted(LOSS_FLAGS))
    p.add_argument("--agg", choices=["attention", "avg", "max"])
    p.add_argument("--split", help="split to evaluate (eval/inspect) or train on (train)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field, e.g. --set training.stage1_epochs=5")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(args.out)
    if args.deterministic:
        cfg.deterministic = True
    if args.tau_u is not None:
        cfg.region.tau_u = args.tau_u
    if args.m is not None:
        cfg.region.m = args.m
    if args.gamma is not None:
        cfg.loss.gamma = args.gamma
    if args.loss is not None:
        cfg.loss.kind = LOSS_FLAGS[args.loss]
    if args.agg is not None:
        cfg.aggregation = args.agg
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        cfg.override(key, value)
    cfg.validate()
    return cfg


def _checkpoint(args, cfg: RunConfig) -> Path:
    return args.checkpoint or Path(cfg.out_dir) / "checkpoint.bin"


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.split:
        cfg.data.train_split = args.split
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    data = load_run_data(cfg)
    if args.stage == "1":
        _, path = train_stage1(cfg, data)
    elif args.stage == "2":
        stage1 = args.checkpoint or out / "checkpoint_stage1.bin"
        _, path = train_stage2(cfg, stage1, data)
    else:
        _, path = train(cfg, data)
    print(f"wrote {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    result = evaluate_run(cfg, _checkpoint(args, cfg), args.split, stage=args.stage)
    print(json.dumps({"map": result.map, "accuracy": result.accuracy}, indent=2))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows = sweep(cfg, args.axis, values)
    for row in rows:
        print(f"{row['axis']}={row['value']}: mAP={row['map']:.4f} acc={row['accuracy']:.4f}")
    return 0


def cmd_inspect(args) -> int:
    cfg = _load_config(args)
    data = load_run_data(cfg)
    est = load_checkpoint(_checkpoint(args, cfg), cfg)
    split = args.split or cfg.data.eval_split
    limit = None if args.limit < 0 else args.limit
    write_attention(cfg, est, data.get(split), Path(cfg.out_dir), limit)
    print(f"wrote {Path(cfg.out_dir) / 'attention.json'}")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        num_images=args.num_images,
        pairs_per_image=args.pairs_per_image,
        num_context_regions=args.context_regions,
        context_informative_fraction=args.context_fraction,
        image_size=args.image_size,
        ambiguity=args.ambiguity,
        seed=args.seed,
    )
    paths = write_synthetic(generate_synthetic(spec), args.out)
    cfg = RunConfig()
    cfg.data.annotations = "annotations.jsonl"
    cfg.data.manifest = "manifest.json"
    cfg.data.proposals = "proposals.jsonl"
    cfg.data.splits = "splits.json"
    cfg.model.context_size = spec.image_size
    cfg.seed = args.seed
    cfg.out_dir = str(Path(args.out) / "run")
    cfg.save(Path(args.out) / "config.json")
    for name, path in paths.items():
        print(f"{name}: {path}")
    print(f"config: {Path(args.out) / 'config.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualglance", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="two-stage training")
    _run_options(p)
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--checkpoint", type=Path, help="stage-1 checkpoint for --stage 2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _run_options(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--stage", choices=["fused", "first"], default="fused")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over one axis")
    _run_options(p)
    p.add_argument("--axis", required=True, choices=["tau_u", "m", "gamma", "loss_kind", "aggregation"])
    p.add_argument("--values", required=True, help="comma separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="dump attention JSON and overlays")
    _run_options(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--limit", type=int, default=-1, help="max overlay images (-1: all)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num-images", type=int, default=400)
    p.add_argument("--pairs-per-image", type=int, default=1)
    p.add_argument("--context-regions", type=int, default=4)
    p.add_argument("--context-fraction", type=float, default=0.6)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--ambiguity", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
