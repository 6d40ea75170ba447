"""Command-line entry points: synth-data, train, eval, gradcam, ablate, seed-sweep."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, TrainConfig, load_config, save_config
from .data import DataError, PhantomConfig, generate_phantoms, phantom_config_dict, save_manifest
from .text import EmbeddingIngestError, InvalidPromptSpec
from .trainer import CheckpointMismatch

log = logging.getLogger("textuda")

# config/data problems exit with 1; argparse already exits with 2 on usage errors
USER_ERRORS = (ConfigError, DataError, EmbeddingIngestError, InvalidPromptSpec, CheckpointMismatch,
               FileNotFoundError)


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="textuda", description=__doc__, formatter_class=_formatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth-data", help="write source/target phantom manifests", formatter_class=_formatter)
    s.add_argument("--out", required=True, help="output directory (gets source/ and target/)")
    s.add_argument("--seed", type=int, default=0, help="phantom generator seed")
    s.add_argument("--subjects", type=int, default=10, help="subjects per domain")
    s.add_argument("--slices", type=int, default=8, help="slices per subject")
    s.add_argument("--size", type=int, default=64, help="slice height and width")
    s.add_argument("--compress", action="store_true", help="gzip the slice payloads")

    s = sub.add_parser("train", help="train a model from a config file", formatter_class=_formatter)
    s.add_argument("--config", required=True, help="JSON or TOML training config")
    s.add_argument("--iters", type=int, default=None, help="override the number of iterations")
    s.add_argument("--seed", type=int, default=None, help="override the seed")
    s.add_argument("--out", default=None, help="override the output directory")
    s.add_argument("--resume", default=None, help="checkpoint to resume from")

    s = sub.add_parser("eval", help="evaluate a checkpoint and write a report", formatter_class=_formatter)
    s.add_argument("--config", required=True, help="config naming the data to evaluate on")
    s.add_argument("--checkpoint", default=None, help="checkpoint file (default: <out_dir>/last.pt)")
    s.add_argument("--domain", choices=("target", "source"), default="target", help="which domain to score")
    s.add_argument("--split", choices=("test", "train", "all"), default="test", help="subject split")
    s.add_argument("--report", default=None, help="report path (default: <out_dir>/report_<domain>.json)")
    s.add_argument("--csv", default=None, help="also write a per-subject CSV here")

    s = sub.add_parser("gradcam", help="write Grad-CAM overlays as PNG files", formatter_class=_formatter)
    s.add_argument("--config", required=True, help="config naming the data")
    s.add_argument("--checkpoint", default=None, help="checkpoint file (default: <out_dir>/last.pt)")
    s.add_argument("--out", default=None, help="PNG directory (default: <out_dir>/gradcam)")
    s.add_argument("--layer", default="dynamic_conv", help="layer tag to explain")
    s.add_argument("--domain", choices=("target", "source"), default="target", help="which domain to explain")
    s.add_argument("--num-slices", type=int, default=2, help="number of test slices to render")

    s = sub.add_parser("ablate", help="train the four loss configurations and tabulate target Dice",
                       formatter_class=_formatter)
    s.add_argument("--budget", default="tiny", help="preset: tiny, smoke or paper")
    s.add_argument("--config", default=None, help="optional base config applied before the budget preset")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="training seeds")
    s.add_argument("--out", default="runs/ablate", help="output directory")
    s.add_argument("--source-only", action="store_true", help="also train the all-lambda-zero baseline")

    s = sub.add_parser("seed-sweep", help="repeat train/eval over seeds and report mean and std",
                       formatter_class=_formatter)
    s.add_argument("--config", required=True, help="training config")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="training seeds")
    s.add_argument("--iters", type=int, default=None, help="override the number of iterations")
    s.add_argument("--out", default="runs/sweep", help="output directory")
    return p


def _load(args, **overrides) -> TrainConfig:
    return load_config(args.config, **overrides)


def cmd_synth_data(args) -> int:
    cfg = PhantomConfig(seed=args.seed, n_subjects=args.subjects, slices_per_subject=args.slices,
                        image_size=args.size)
    src, tgt = generate_phantoms(cfg)
    out = Path(args.out)
    for name, ds in (("source", src), ("target", tgt)):
        path = save_manifest(ds, out / name, compress=args.compress)
        print(f"{name}: {ds.num_slices} slices -> {path}")
    (out / "phantom.json").write_text(json.dumps(phantom_config_dict(cfg), indent=1, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _load(args, iterations=args.iters, seed=args.seed, out_dir=args.out)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    save_config(cfg, Path(cfg.out_dir) / "config.json")
    result = train(cfg, resume=args.resume, progress=args.verbose)
    print(f"checkpoint: {result['checkpoint']}")
    print(f"log: {result['log']}")
    if result["best_dice"] >= 0:
        print(f"best target Dice: {result['best_dice']:.2f}")
    return 0


def _dataset(cfg: TrainConfig, domain: str, split: str):
    from .trainer import load_datasets

    source, target = load_datasets(cfg)
    ds = source if domain == "source" else target
    if not ds.labeled:
        raise DataError(f"{domain} data has no labels to evaluate against")
    return ds if split == "all" else ds.subset(split)


def _checkpoint(cfg: TrainConfig, path) -> Path:
    ckpt = Path(path) if path else Path(cfg.out_dir) / "last.pt"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    return ckpt


def cmd_eval(args) -> int:
    from .trainer import evaluate

    cfg = _load(args)
    ckpt = _checkpoint(cfg, args.checkpoint)
    report = evaluate(ckpt, _dataset(cfg, args.domain, args.split))
    out = Path(args.report) if args.report else Path(cfg.out_dir) / f"report_{args.domain}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    print(report.table())
    print(f"report: {out}")
    return 0


def cmd_gradcam(args) -> int:
    from .gradcam import LAYER_TAGS, gradcam, save_overlay
    from .trainer import bank_for, model_from_checkpoint

    if args.layer not in LAYER_TAGS:
        raise ConfigError(f"unknown layer tag {args.layer!r}; options: {', '.join(LAYER_TAGS)}")
    cfg = _load(args)
    model, ckpt_cfg, banks = model_from_checkpoint(_checkpoint(cfg, args.checkpoint))
    ds = _dataset(cfg, args.domain, "test")
    E = bank_for(banks, ds.modality)
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "gradcam"
    written = 0
    slices = ((s.id, i, s.images[i], s.labels[i]) for s in ds.subjects for i in range(len(s.images)))
    for sid, idx, image, label in slices:
        if written >= args.num_slices:
            break
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        for c in range(1, ckpt_cfg.num_classes):
            if not (label == c).any():
                continue
            cam = gradcam(model, x, E, c, args.layer)
            term = ckpt_cfg.class_terms[c]
            save_overlay(image, cam, out / f"{sid}_{idx:03d}_c{c}_{args.layer}.png", title=f"{sid}/{idx} {term}")
        written += 1
    print(f"overlays: {out}")
    return 0


def cmd_ablate(args) -> int:
    from .experiments import ABLATIONS, budget_config, ordering_holds, run_ablation

    base = _load(args) if args.config else None
    cfg = budget_config(args.budget, base)
    table = run_ablation(cfg, args.seeds, args.out, include_source_only=args.source_only)
    print(table.format())
    means = [table.mean(n) for n in ABLATIONS]
    verdict = "holds" if ordering_holds(means) else "does not hold"
    print(f"ordering {' <= '.join(ABLATIONS)} (1-point ties): {verdict}")
    return 0


def cmd_seed_sweep(args) -> int:
    from .experiments import seed_sweep

    cfg = _load(args, iterations=args.iters)
    table = seed_sweep(cfg, args.seeds, args.out)
    print(table.format())
    return 0


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "eval": cmd_eval, "gradcam": cmd_gradcam,
            "ablate": cmd_ablate, "seed-sweep": cmd_seed_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
