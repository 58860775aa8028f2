"""Multi-exit model composition and the three training strategies.

* classifier-wise: backbone frozen bit-for-bit, every branch trained alone
  against cached intermediate sequences;
* end-to-end: one optimizer over backbone and branches minimizing the
  weighted sum of the final loss and all branch losses;
* layer-wise: stages of consecutive layers trained against the stage's
  exit, earlier layers frozen as training advances.

One strategy run owns its model exclusively; classifier-wise branch fits
only ever read the backbone.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .branches import ARCHITECTURES, ExitBranch, make_branch
from .data import LabeledImageSet, batches, train_val_split
from .layers import Module
from .optim import Adam, PlateauScheduler
from .tensor import Tensor, cross_entropy, l1_loss, make_rng, no_grad, reshape
from .vit import ViTBackbone, ViTConfig

__all__ = [
    "STRATEGIES",
    "TASKS",
    "MultiExitModel",
    "TrainConfig",
    "EpochRecord",
    "TrainResult",
    "StageResult",
    "TrainingDivergedError",
    "combined_loss",
    "task_loss",
    "evaluate",
    "train_backbone",
    "train_classifier_wise",
    "train_end_to_end",
    "train_layer_wise",
    "derive_branch_seed",
    "lambda_final_double",
]

STRATEGIES = ("classifier-wise", "end-to-end", "layer-wise")
TASKS = ("classification", "regression")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    plateau_factor: float = 0.6
    plateau_tolerance: int = 2
    stop_tolerance: int = 5
    verbose: bool = False


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float
    lr: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    best_val_metric: float = math.nan
    stopped_early: bool = False


@dataclass
class StageResult:
    stage: int
    first_layer: int
    last_layer: int
    exit_name: str
    result: TrainResult


class MultiExitModel(Module):
    """Backbone plus branches keyed by (location, architecture).

    Several branches may share a location only for profiling sweeps; the
    anytime runtime requires at most one per location.
    """

    def __init__(self, backbone: ViTBackbone, task: str = "classification"):
        if task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {task!r}")
        self.backbone = backbone
        self.task = task
        self.branches: dict[int, dict[str, ExitBranch]] = {}
        self.backbone_trained = False

    @property
    def config(self) -> ViTConfig:
        return self.backbone.config

    def add_branch(
        self,
        location: int,
        arch: str,
        branch: ExitBranch | None = None,
        seed: int | None = None,
        pool_includes_cls: bool = True,
    ) -> ExitBranch:
        depth = self.config.depth
        if not 1 <= location <= depth:
            raise ValueError(f"branch location {location} outside 1..{depth}")
        if branch is None:
            branch_seed = seed if seed is not None else derive_branch_seed(0, location, arch)
            branch = make_branch(arch, self.config, branch_seed, pool_includes_cls=pool_includes_cls)
        self.branches.setdefault(location, {})[arch] = branch
        return branch

    def branch_at(self, location: int, arch: str) -> ExitBranch:
        try:
            return self.branches[location][arch]
        except KeyError:
            raise KeyError(f"no branch {arch!r} at location {location}") from None

    def branch_locations(self) -> list[int]:
        return sorted(self.branches)

    def iter_branches(self) -> Iterator[tuple[int, str, ExitBranch]]:
        """Branches in deterministic order: location ascending, then the
        canonical architecture order."""
        for location in self.branch_locations():
            at_loc = self.branches[location]
            for arch in ARCHITECTURES:
                if arch in at_loc:
                    yield location, arch, at_loc[arch]

    def named_parameters(self, prefix: str = ""):
        base = f"{prefix}." if prefix else ""
        yield from self.backbone.named_parameters(f"{base}backbone")
        for location, arch, branch in self.iter_branches():
            yield from branch.named_parameters(f"{base}branches.{location}.{arch}")

    def modules(self):
        yield self
        yield from self.backbone.modules()
        for _, _, branch in self.iter_branches():
            yield from branch.modules()


def derive_branch_seed(base_seed: int, location: int, arch: str) -> int:
    """Stable per-branch seed so sweeps are reproducible at any order."""
    return base_seed * 1_000_003 + location * 101 + ARCHITECTURES.index(arch)


def task_loss(task: str, output: Tensor, targets: np.ndarray) -> Tensor:
    if task == "classification":
        return cross_entropy(output, targets)
    flat = reshape(output, (output.shape[0],)) if output.ndim == 2 else output
    return l1_loss(flat, Tensor(np.asarray(targets, dtype=np.float64)))


def metric_kind(task: str) -> str:
    return "accuracy" if task == "classification" else "mae"


def _metric(task: str, outputs: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    """Returns (sum over samples, count) of the per-sample metric term."""
    if task == "classification":
        return float((outputs.argmax(axis=1) == targets).sum()), len(targets)
    return float(np.abs(outputs.reshape(-1) - targets).sum()), len(targets)


def combined_loss(
    final_loss: Tensor,
    branch_losses: Sequence[Tensor],
    branch_weights: Sequence[float],
    final_weight: float = 1.0,
) -> Tensor:
    """Weighted sum of the final loss and the branch losses.

    Zero-weight terms are dropped from the graph entirely, so gradients with
    all weights zero are bit-identical to backbone-only training.
    """
    if len(branch_losses) != len(branch_weights):
        raise ValueError("one weight per branch loss required")
    if any(w < 0 for w in branch_weights):
        raise ValueError("branch loss weights must be nonnegative")
    total = final_loss if final_weight == 1.0 else final_loss * final_weight
    for loss, weight in zip(branch_losses, branch_weights):
        if weight == 0.0:
            continue
        total = total + (loss if weight == 1.0 else loss * weight)
    return total


def lambda_final_double(n_branches: int) -> list[float]:
    """Branch weights making the final exit count double each early exit."""
    return [0.5] * n_branches


def evaluate(forward, ds: LabeledImageSet, task: str, batch_size: int = 256) -> tuple[float, float]:
    """Mean loss and task metric of ``forward`` over a dataset."""
    loss_sum = 0.0
    metric_sum = 0.0
    n = 0
    with no_grad():
        for xb, yb in batches(ds, batch_size):
            out = forward(xb)
            loss_sum += task_loss(task, out, yb).item() * len(yb)
            m, _ = _metric(task, out.data, yb)
            metric_sum += m
            n += len(yb)
    return loss_sum / n, metric_sum / n


def _fit(
    model: Module,
    trainable: list[Tensor],
    forward_loss,
    eval_forward,
    train_set: LabeledImageSet,
    val_set: LabeledImageSet,
    task: str,
    cfg: TrainConfig,
    tag: str = "",
) -> TrainResult:
    """Shared epoch loop: Adam, plateau schedule, early stop, best-epoch
    restore. ``forward_loss`` must run the model in training mode on a batch;
    ``eval_forward`` maps images to outputs for validation."""
    opt = Adam(trainable, lr=cfg.lr)
    sched = PlateauScheduler(
        cfg.lr,
        factor=cfg.plateau_factor,
        plateau_tolerance=cfg.plateau_tolerance,
        stop_tolerance=cfg.stop_tolerance,
    )
    shuffle_rng = make_rng(cfg.seed)
    result = TrainResult()
    best_state = [p.data.copy() for p in trainable]
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        epoch_loss = 0.0
        n_seen = 0
        for i, (xb, yb) in enumerate(batches(train_set, cfg.batch_size, shuffle_rng)):
            opt.zero_grad()
            loss = forward_loss(xb, yb)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"{tag or 'fit'}: non-finite loss {value} at epoch {epoch}, batch {i} (lr={opt.lr})"
                )
            loss.backward()
            opt.step()
            epoch_loss += value * len(yb)
            n_seen += len(yb)
        model.eval()
        val_loss, val_metric = evaluate(eval_forward, val_set, task)
        record = EpochRecord(epoch, epoch_loss / n_seen, val_loss, val_metric, opt.lr)
        result.history.append(record)
        if cfg.verbose:
            print(
                f"[{tag}] epoch {epoch:3d}  train {record.train_loss:.4f}  "
                f"val {val_loss:.4f}  {metric_kind(task)} {val_metric:.4f}  lr {opt.lr:.2g}"
            )
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_val_metric = val_metric
            result.best_epoch = epoch
            best_state = [p.data.copy() for p in trainable]
        new_lr, stop = sched.step(val_loss)
        opt.lr = new_lr
        if stop:
            result.stopped_early = True
            break
    for p, best in zip(trainable, best_state):
        p.data[...] = best
    model.eval()
    return result


def train_backbone(model: MultiExitModel, dataset: LabeledImageSet, cfg: TrainConfig) -> TrainResult:
    """Minimize the task loss over the backbone alone; restores the best
    validation checkpoint."""
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    backbone = model.backbone
    train_set, val_set = train_val_split(dataset, cfg.val_fraction, cfg.seed)

    def forward_loss(xb, yb):
        return task_loss(model.task, backbone(xb), yb)

    result = _fit(
        backbone,
        backbone.parameters(),
        forward_loss,
        backbone,
        train_set,
        val_set,
        model.task,
        cfg,
        tag="backbone",
    )
    model.backbone_trained = True
    return result


@dataclass
class _FeatureSet:
    """Cached intermediate sequences standing in for a dataset."""

    images: np.ndarray  # [n, tokens, dim]
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


def _cache_sequences(backbone: ViTBackbone, ds: LabeledImageSet, location: int, batch_size: int) -> np.ndarray:
    """Frozen-backbone activations after ``location`` layers, inference mode."""
    backbone.eval()
    chunks = []
    with no_grad():
        for xb, _ in batches(ds, batch_size):
            seq = backbone.forward_prefix(xb, location)
            chunks.append(seq.data)
    return np.concatenate(chunks, axis=0)


def train_classifier_wise(
    model: MultiExitModel,
    dataset: LabeledImageSet,
    cfg: TrainConfig,
    locations: Sequence[int] | None = None,
    archs: Sequence[str] | None = None,
) -> dict[tuple[int, str], TrainResult]:
    """Freeze the backbone and train each requested branch independently.

    Branches not yet attached are created with a seed derived from
    (cfg.seed, location, architecture). Intermediate sequences are cached
    per location, so the backbone runs once per location, not per branch.
    """
    if not model.backbone_trained:
        warnings.warn("classifier-wise training on an apparently untrained backbone")
    locations = list(locations) if locations is not None else list(range(1, model.config.depth + 1))
    archs = list(archs) if archs is not None else list(ARCHITECTURES)
    train_set, val_set = train_val_split(dataset, cfg.val_fraction, cfg.seed)

    results: dict[tuple[int, str], TrainResult] = {}
    for location in locations:
        feat_train = _FeatureSet(
            _cache_sequences(model.backbone, train_set, location, cfg.batch_size),
            train_set.targets,
        )
        feat_val = _FeatureSet(
            _cache_sequences(model.backbone, val_set, location, cfg.batch_size),
            val_set.targets,
        )
        for arch in archs:
            branch = model.branches.get(location, {}).get(arch)
            if branch is None:
                branch = model.add_branch(
                    location, arch, seed=derive_branch_seed(cfg.seed, location, arch)
                )

            def forward_loss(xb, yb, branch=branch):
                return task_loss(model.task, branch(xb), yb)

            def eval_forward(xb, branch=branch):
                return branch(xb)

            results[(location, arch)] = _fit(
                branch,
                branch.parameters(),
                forward_loss,
                eval_forward,
                feat_train,
                feat_val,
                model.task,
                cfg,
                tag=f"{arch}@{location}",
            )
    return results


def train_end_to_end(
    model: MultiExitModel,
    dataset: LabeledImageSet,
    cfg: TrainConfig,
    branch_weights: Sequence[float] | float | None = None,
    final_weight: float = 1.0,
) -> TrainResult:
    """Train backbone and branches simultaneously under the combined loss."""
    exits = list(model.iter_branches())
    if branch_weights is None:
        weights = [1.0] * len(exits)
    elif isinstance(branch_weights, (int, float)):
        weights = [float(branch_weights)] * len(exits)
    else:
        weights = [float(w) for w in branch_weights]
        if len(weights) != len(exits):
            raise ValueError(f"{len(exits)} branches but {len(weights)} weights")
    train_set, val_set = train_val_split(dataset, cfg.val_fraction, cfg.seed)

    params = model.backbone.parameters()
    for _, _, branch in exits:
        params.extend(branch.parameters())

    def forward_loss(xb, yb):
        seqs, logits = model.backbone.forward_collect(xb)
        final = task_loss(model.task, logits, yb)
        branch_losses = []
        active_weights = []
        for (location, _, branch), w in zip(exits, weights):
            if w == 0.0:
                continue
            branch_losses.append(task_loss(model.task, branch(seqs[location - 1]), yb))
            active_weights.append(w)
        return combined_loss(final, branch_losses, active_weights, final_weight)

    def eval_forward(xb):
        return model.backbone(xb)

    result = _fit(
        model,
        params,
        forward_loss,
        eval_forward,
        train_set,
        val_set,
        model.task,
        cfg,
        tag="end-to-end",
    )
    model.backbone_trained = True
    return result


def train_layer_wise(
    model: MultiExitModel,
    dataset: LabeledImageSet,
    cfg: TrainConfig,
    locations: Sequence[int] | None = None,
) -> list[StageResult]:
    """Progressively train layer blocks against their exits, freezing every
    earlier block; the final stage trains the remaining layers and head."""
    backbone = model.backbone
    if locations is None:
        locations = model.branch_locations()
    locations = list(locations)
    if locations != sorted(locations):
        raise ValueError(f"layer-wise branch locations must be ascending, got {locations}")
    for b in locations:
        if len(model.branches.get(b, {})) != 1:
            raise ValueError(f"layer-wise needs exactly one branch at location {b}")
    train_set, val_set = train_val_split(dataset, cfg.val_fraction, cfg.seed)

    stages: list[StageResult] = []
    prev = 0
    for stage_idx, b in enumerate(locations, start=1):
        arch, branch = next(iter(model.branches[b].items()))
        params = [] if prev else backbone.patch_embed.parameters()
        for layer in backbone.layers[prev:b]:
            params = params + layer.parameters()
        params = params + branch.parameters()

        def forward_loss(xb, yb, b=b, branch=branch):
            return task_loss(model.task, branch(backbone.forward_prefix(xb, b)), yb)

        def eval_forward(xb, b=b, branch=branch):
            return branch(backbone.forward_prefix(xb, b))

        result = _fit(
            model,
            params,
            forward_loss,
            eval_forward,
            train_set,
            val_set,
            model.task,
            cfg,
            tag=f"stage{stage_idx}:{arch}@{b}",
        )
        stages.append(StageResult(stage_idx, prev + 1, b, f"{arch}@{b}", result))
        prev = b

    params = [] if prev else backbone.patch_embed.parameters()
    for layer in backbone.layers[prev:]:
        params = params + layer.parameters()
    params = params + backbone.final_norm.parameters() + backbone.head.parameters()

    def final_forward_loss(xb, yb):
        return task_loss(model.task, backbone(xb), yb)

    result = _fit(
        model,
        params,
        final_forward_loss,
        backbone,
        train_set,
        val_set,
        model.task,
        cfg,
        tag="stage-final",
    )
    stages.append(
        StageResult(len(locations) + 1, prev + 1, backbone.config.depth, "final", result)
    )
    model.backbone_trained = True
    return stages
