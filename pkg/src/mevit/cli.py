"""Command-line surface tying the pipeline together.

Commands: train-backbone, train-exits, profile, infer, export-plot.
The data directory comes from --data-dir or $MEVIT_DATA_DIR (default
./data). Every command takes --seed and logs it, so any run can be
reproduced bit-exactly.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .anytime import BudgetPolicy, run_anytime, timer_interrupt
from .branches import ARCHITECTURES
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    LabeledImageSet,
    gen_count_regression,
    gen_two_class_images,
    load_fashion_mnist,
)
from .multi_exit import (
    STRATEGIES,
    MultiExitModel,
    TrainConfig,
    derive_branch_seed,
    lambda_final_double,
    metric_kind,
    train_backbone,
    train_classifier_wise,
    train_end_to_end,
    train_layer_wise,
)
from .plotting import emit_plot_script, render_profile_figure
from .profiling import profile_all_exits, read_profiles_csv, write_profiles_csv
from .tensor import Tensor
from .vit import ViTBackbone, ViTConfig

DATASETS = ("fashion-mnist", "two-class", "count-blobs")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="RNG seed (logged; reruns are bit-exact)")


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=DATASETS, default="fashion-mnist")
    p.add_argument("--data-dir", default=None, help="overrides $MEVIT_DATA_DIR (default ./data)")
    p.add_argument("--limit", type=int, default=None, help="cap the number of samples")
    p.add_argument("--synth-size", type=int, default=2000, help="sample count for synthetic datasets")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--verbose", action="store_true")


def _load_dataset(args, split: str) -> LabeledImageSet:
    if args.dataset == "fashion-mnist":
        return load_fashion_mnist(args.data_dir, split, limit=args.limit)
    n = args.synth_size if split == "train" else max(1, args.synth_size // 4)
    seed = args.seed if split == "train" else args.seed + 1
    if args.dataset == "two-class":
        ds = gen_two_class_images(n, seed, split=split)
    else:
        ds = gen_count_regression(n, seed, split=split)
    if args.limit is not None:
        ds = ds.subset(slice(0, args.limit))
    return ds


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        verbose=args.verbose,
    )


def _parse_locations(text: str, depth: int) -> list[int]:
    if text == "all":
        return list(range(1, depth + 1))
    locations = [int(tok) for tok in text.split(",") if tok]
    bad = [b for b in locations if not 1 <= b <= depth]
    if bad:
        raise SystemExit(f"locations {bad} outside 1..{depth}")
    return locations


def cmd_train_backbone(args) -> int:
    print(f"seed: {args.seed}")
    config = ViTConfig(
        image_size=args.image_size,
        patch_size=args.patch_size,
        channels=args.channels,
        embed_dim=args.embed_dim,
        num_heads=args.heads,
        depth=args.depth,
        mlp_ratio=args.mlp_ratio,
        num_outputs=1 if args.dataset == "count-blobs" else args.classes,
        dropout=args.dropout_rate,
    )
    task = "regression" if args.dataset == "count-blobs" else "classification"
    train_set = _load_dataset(args, "train")
    cfg = _train_config(args)

    lrs = [float(tok) for tok in args.lr_sweep.split(",")] if args.lr_sweep else [args.lr]
    best = None
    for lr in lrs:
        model = MultiExitModel(ViTBackbone(config, seed=args.seed), task)
        run_cfg = TrainConfig(**{**vars(cfg), "lr": lr})
        result = train_backbone(model, train_set, run_cfg)
        print(
            f"lr {lr:g}: best val loss {result.best_val_loss:.4f} "
            f"({metric_kind(task)} {result.best_val_metric:.4f}, epoch {result.best_epoch})"
        )
        if best is None or result.best_val_loss < best[1].best_val_loss:
            best = (model, result, lr)
    model, result, lr = best
    save_checkpoint(
        model,
        args.out,
        metadata={"strategy": "backbone", "seed": args.seed, "lr": lr, "epochs": args.epochs},
    )
    print(f"saved backbone to {args.out}")
    return 0


def cmd_train_exits(args) -> int:
    print(f"seed: {args.seed}")
    model = load_checkpoint(args.model)
    depth = model.config.depth
    locations = _parse_locations(args.locations, depth)
    archs = list(ARCHITECTURES) if args.arch == "all" else [args.arch]
    for arch in archs:
        if arch not in ARCHITECTURES:
            raise SystemExit(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    cfg = _train_config(args)
    train_set = _load_dataset(args, "train")

    if args.strategy == "classifier-wise":
        results = train_classifier_wise(model, train_set, cfg, locations, archs)
        for (location, arch), result in results.items():
            print(
                f"{arch}@{location}: val loss {result.best_val_loss:.4f} "
                f"{metric_kind(model.task)} {result.best_val_metric:.4f}"
            )
    else:
        if args.arch == "all":
            raise SystemExit(f"{args.strategy} needs a single --arch, not 'all'")
        for location in locations:
            if args.arch not in model.branches.get(location, {}):
                model.add_branch(
                    location, args.arch, seed=derive_branch_seed(args.seed, location, args.arch)
                )
        if args.strategy == "end-to-end":
            weights = lambda_final_double(len(locations)) if args.lambda_final_double else None
            result = train_end_to_end(model, train_set, cfg, branch_weights=weights)
            print(
                f"end-to-end: val loss {result.best_val_loss:.4f} "
                f"{metric_kind(model.task)} {result.best_val_metric:.4f}"
            )
        else:
            stages = train_layer_wise(model, train_set, cfg)
            for stage in stages:
                print(
                    f"stage {stage.stage} (layers {stage.first_layer}..{stage.last_layer}, "
                    f"exit {stage.exit_name}): val loss {stage.result.best_val_loss:.4f} "
                    f"{metric_kind(model.task)} {stage.result.best_val_metric:.4f}"
                )
    save_checkpoint(
        model,
        args.out,
        metadata={"strategy": args.strategy, "seed": args.seed, "epochs": args.epochs},
    )
    print(f"saved multi-exit model to {args.out}")
    return 0


def cmd_profile(args) -> int:
    print(f"seed: {args.seed}")
    model = load_checkpoint(args.model)
    ds = _load_dataset(args, args.split)
    locations = _parse_locations(args.locations, model.config.depth)
    archs = list(ARCHITECTURES) if args.arch == "all" else [args.arch]
    profiles = profile_all_exits(
        model, ds, locations, archs, per_architecture=args.per_architecture
    )
    write_profiles_csv(profiles, args.out)
    print(f"wrote {len(profiles)} profile rows to {args.out}")
    figure_path = Path(args.out).with_suffix(".png")
    render_profile_figure(profiles, figure_path)
    print(f"wrote figure to {figure_path}")
    return 0


def cmd_infer(args) -> int:
    print(f"seed: {args.seed}")
    model = load_checkpoint(args.model)
    if args.arch is not None:
        # a profiling zoo carries several branches per location; keep one family
        pruned = MultiExitModel(model.backbone, model.task)
        pruned.backbone_trained = model.backbone_trained
        for location, arch, branch in model.iter_branches():
            if arch == args.arch:
                pruned.add_branch(location, arch, branch=branch)
        model = pruned
    ds = _load_dataset(args, args.split)
    image = Tensor(ds.images[args.index])
    if args.budget_flops is not None:
        policy = BudgetPolicy(budget_flops=args.budget_flops)
    else:
        policy = BudgetPolicy(interrupt=timer_interrupt(args.interrupt_after_ms))
    result = run_anytime(model, image, policy)
    print(
        f"exit {result.exit_arch}@{result.exit_location}: "
        f"{result.flops_spent:,} FLOPs, {result.exits_evaluated} exits evaluated"
    )
    if model.task == "classification":
        probs = np.exp(result.prediction - result.prediction.max())
        probs /= probs.sum()
        print(f"predicted class {int(result.prediction.argmax())} (p={probs.max():.3f})")
    else:
        print(f"predicted count {float(result.prediction[0]):.2f}")
    print(f"target: {ds.targets[args.index]}")
    return 0


def cmd_export_plot(args) -> int:
    profiles = read_profiles_csv(args.profiles)
    render_profile_figure(profiles, args.out)
    print(f"wrote figure to {args.out}")
    if args.script:
        emit_plot_script(profiles, args.script, figure_path=str(args.out))
        print(f"wrote plot script to {args.script}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mevit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-backbone", help="train the ViT backbone alone")
    _add_common(p)
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--image-size", type=int, default=28)
    p.add_argument("--patch-size", type=int, default=7)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--mlp-ratio", type=float, default=2.0)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dropout-rate", type=float, default=0.1)
    p.add_argument("--lr-sweep", default=None, help="comma list, e.g. 1e-3,1e-4,1e-5; keeps the best")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("train-exits", help="attach and train early-exit branches")
    _add_common(p)
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--model", required=True, help="backbone checkpoint to start from")
    p.add_argument("--strategy", choices=STRATEGIES, required=True)
    p.add_argument("--arch", default="all", help=f"one of {ARCHITECTURES} or 'all'")
    p.add_argument("--locations", default="all", help="comma list of layer indices or 'all'")
    p.add_argument(
        "--lambda-final-double",
        action="store_true",
        help="end-to-end: weight each branch loss 0.5 so the final exit counts double",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_exits)

    p = sub.add_parser("profile", help="evaluate every exit; write CSV and figure")
    _add_common(p)
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--arch", default="all")
    p.add_argument("--locations", default="all")
    p.add_argument(
        "--per-architecture",
        action="store_true",
        help="mark practical exits against each architecture's own curve only",
    )
    p.add_argument("--out", default="profiles.csv")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("infer", help="anytime inference under a budget or interrupt")
    _add_common(p)
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--index", type=int, default=0, help="sample index to classify")
    p.add_argument("--arch", default=None,
                   help="restrict a multi-branch zoo to this branch family")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--budget-flops", type=int, default=None)
    group.add_argument("--interrupt-after-ms", type=float, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-plot", help="re-render the figure from a profile CSV")
    _add_common(p)
    p.add_argument("--profiles", required=True)
    p.add_argument("--out", default="profiles.png")
    p.add_argument("--script", default=None, help="also write a standalone plot script here")
    p.set_defaults(func=cmd_export_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
