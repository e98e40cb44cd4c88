"""Command-line front end for the saccade attention pipeline.

Subcommands mirror the pipeline stages: train the teacher, extract rollout
targets, train the selector, train the student, evaluate checkpoints, dump
heat maps, report analytic costs, and run multi-model comparisons.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .cost import model_cost
from .data import build_saccade_targets, read_saccade_file, write_saccade_file
from .reporting import emit_heatmap_pgm, emit_mask_pgm, render_table, write_report
from .rollout import attention_rollout, cls_heat, fuse_heads, topk_indices
from .training import (
    ExperimentConfig,
    compare,
    evaluate,
    prepare_data,
    targets_by_id,
    train,
)
from .vit import vit_forward


def _load_config(path: str | None, seed: int | None, **overrides) -> ExperimentConfig:
    if path:
        with open(path) as fh:
            fields = json.load(fh)
    else:
        fields = {}
    fields.update({k: v for k, v in overrides.items() if v is not None})
    config = ExperimentConfig(**fields)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    return config


def _train_command(config: ExperimentConfig, args, targets=None, selector=None) -> None:
    data = prepare_data(config, data_dir=args.data)
    history_path = args.out + ".history.jsonl"
    result = train(config, data, targets=targets, selector=selector,
                   history_path=history_path)
    save_checkpoint(args.out, result.params, dataclasses.asdict(config))
    metrics = evaluate(config, result.params, data.test, targets=targets, selector=selector)
    print(json.dumps({
        "checkpoint": args.out,
        "history": history_path,
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "test": metrics,
    }, indent=2))


def _load_selector(path: str):
    params, raw = load_checkpoint(path)
    config = ExperimentConfig(**{k: v for k, v in raw.items()})
    return params, config.selector_config()


def cmd_train_teacher(args) -> None:
    config = _load_config(args.config, args.seed, model="teacher_vit")
    _train_command(config, args)


def cmd_train_baseline(args) -> None:
    config = _load_config(args.config, args.seed, model="simple_vit")
    _train_command(config, args)


def cmd_build_targets(args) -> None:
    params, raw = load_checkpoint(args.checkpoint)
    config = ExperimentConfig(**raw)
    k = args.k if args.k is not None else config.k
    data = prepare_data(config, data_dir=args.data)
    records = data.train + data.val + data.test
    targets = build_saccade_targets(params, config.vit_config(), records, k)
    write_saccade_file(args.out, targets)
    print(f"wrote {len(targets)} records (N={config.vit_config().n_patches}, k={k}) to {args.out}")


def cmd_train_selector(args) -> None:
    config = _load_config(args.config, args.seed, model="selector")
    targets = targets_by_id(read_saccade_file(args.targets))
    _train_command(config, args, targets=targets)


def cmd_train_student(args) -> None:
    config = _load_config(args.config, args.seed, model="sanvit")
    targets = targets_by_id(read_saccade_file(args.targets)) if args.targets else None
    selector = _load_selector(args.selector) if args.selector else None
    _train_command(config, args, targets=targets, selector=selector)


def cmd_eval(args) -> None:
    params, raw = load_checkpoint(args.checkpoint)
    config = ExperimentConfig(**raw)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    data = prepare_data(config, data_dir=args.data)
    targets = targets_by_id(read_saccade_file(args.targets)) if args.targets else None
    selector = _load_selector(args.selector) if args.selector else None
    metrics = evaluate(config, params, data.test, targets=targets, selector=selector)
    print(json.dumps(metrics, indent=2))


def cmd_rollout(args) -> None:
    params, raw = load_checkpoint(args.checkpoint)
    config = ExperimentConfig(**raw)
    vit_config = config.vit_config()
    data = prepare_data(config, data_dir=args.data)
    records = data.train + data.val + data.test
    record = next((r for r in records if r.id == args.index), None)
    if record is None:
        raise SystemExit(f"no image with id {args.index} (dataset holds {len(records)} records)")
    with ad.no_grad():
        _, stack = vit_forward(record.pixels, params, vit_config)
    heat = cls_heat(attention_rollout(fuse_heads(stack, args.head_fusion)))
    k = args.k if args.k is not None else config.k
    indices = topk_indices(heat.heat, k)
    emit_heatmap_pgm(heat, args.out)
    mask_path = args.out + ".mask.pgm"
    emit_mask_pgm(indices, heat.grid_size, mask_path)
    print(json.dumps({
        "image_id": record.id,
        "label": record.label,
        "heatmap": args.out,
        "mask": mask_path,
        "topk_indices": indices,
    }, indent=2))


def cmd_cost(args) -> None:
    config = _load_config(args.config, None)
    selector_cfg = config.selector_config() if config.model == "sanvit" else None
    report = model_cost(config.model_config(), selector=selector_cfg).as_dict()
    report["model"] = config.model
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_compare(args) -> None:
    configs = []
    for path in args.config:
        config = _load_config(path, args.seed)
        configs.append(config)
    report = compare(configs, data_dir=args.data, out_dir=args.workdir)
    if args.out:
        write_report(report, args.out)
    print(render_table(report["rows"]))
    print()
    print(json.dumps(report["reference"], indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saccadenet",
        description="train and analyze the saccade attention pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON experiment config path")
        p.add_argument("--data", help="dataset directory (cifar100 binaries)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train-teacher", help="train the attention teacher")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-baseline", help="train the full-attention baseline")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("build-targets", help="extract rollout top-k targets")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True, help="teacher checkpoint")
    p.add_argument("--k", type=int, help="patches per image (default: config k)")
    p.add_argument("--out", required=True, help="target file output path")
    p.set_defaults(func=cmd_build_targets)

    p = sub.add_parser("train-selector", help="train the patch selector CNN")
    common(p)
    p.add_argument("--targets", required=True, help="saccade-target file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_train_selector)

    p = sub.add_parser("train-student", help="train the reduced-attention student")
    common(p)
    p.add_argument("--selector", help="selector checkpoint (index_source 'san')")
    p.add_argument("--targets", help="target file (index_source 'ground_truth')")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", help="target file (selector / ground-truth student)")
    p.add_argument("--selector", help="selector checkpoint (student with 'san' source)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="emit a rollout heat map and top-k mask")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True, help="teacher checkpoint")
    p.add_argument("--index", type=int, default=0, help="image id to visualize")
    p.add_argument("--k", type=int, help="mask size (default: config k)")
    p.add_argument("--head-fusion", default="mean", choices=("mean", "max", "min"))
    p.add_argument("--out", required=True, help="heat map PGM path")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("cost", help="analytic parameter/FLOP report for a config")
    p.add_argument("--config", help="JSON experiment config path")
    p.add_argument("--out", help="write the JSON report here too")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("compare", help="train and compare multiple configs")
    p.add_argument("--config", action="append", required=True,
                   help="JSON config path (repeat per model)")
    p.add_argument("--data", help="dataset directory (cifar100 binaries)")
    p.add_argument("--seed", type=int, help="override every config seed")
    p.add_argument("--workdir", help="directory for per-run history files")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
