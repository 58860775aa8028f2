"""Per-exit profiling: metric vs cumulative FLOPs, practical-branch marking,
and the delimited on-disk form of the profile table.

A branch is practical when its metric strictly beats every branch at any
earlier location (ties lose: an equally accurate later exit is never worth
extra compute). By default "every branch" spans all architectures in the
sweep; ``per_architecture=True`` restricts the comparison to each branch's
own curve. Several branches at one location can all be practical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .branches import ARCHITECTURES
from .data import LabeledImageSet, batches
from .flops import cumulative_flops, final_exit_flops
from .multi_exit import MultiExitModel, metric_kind
from .tensor import no_grad

__all__ = [
    "ExitProfile",
    "FINAL_ARCH",
    "CSV_HEADER",
    "MixedMetricError",
    "MissingBranchError",
    "mark_practical",
    "profile_all_exits",
    "write_profiles_csv",
    "read_profiles_csv",
    "export_profiles",
]

FINAL_ARCH = "final"
CSV_HEADER = ["location", "arch", "metric_kind", "metric_value", "cumulative_flops", "practical"]

METRIC_HIGHER_BETTER = {"accuracy": True, "mae": False}


class MixedMetricError(ValueError):
    pass


class MissingBranchError(LookupError):
    pass


@dataclass(frozen=True)
class ExitProfile:
    """One row of the exit table: where, what, how good, at what cost."""

    location: int
    arch: str
    metric_kind: str
    metric_value: float
    cumulative_flops: int
    practical: bool = False


def _direction(profiles: Sequence[ExitProfile]) -> bool:
    kinds = {p.metric_kind for p in profiles}
    if len(kinds) > 1:
        raise MixedMetricError(f"profiles mix metric kinds {sorted(kinds)}")
    kind = kinds.pop()
    if kind not in METRIC_HIGHER_BETTER:
        raise MixedMetricError(f"unknown metric kind {kind!r}")
    return METRIC_HIGHER_BETTER[kind]


def mark_practical(
    profiles: Sequence[ExitProfile], per_architecture: bool = False
) -> list[ExitProfile]:
    """Return profiles with the practical flag recomputed.

    Final-exit rows keep practical=False and do not suppress branches.
    """
    branch_rows = [p for p in profiles if p.arch != FINAL_ARCH]
    if not branch_rows:
        return [replace(p, practical=False) for p in profiles]
    higher_better = _direction(branch_rows)

    def beats(a: float, b: float) -> bool:
        return a > b if higher_better else a < b

    best_before: dict[str, float] = {}
    flags: dict[int, bool] = {}
    for location in sorted({p.location for p in branch_rows}):
        group = [p for p in branch_rows if p.location == location]
        for p in group:
            key = p.arch if per_architecture else ""
            flags[id(p)] = key not in best_before or beats(p.metric_value, best_before[key])
        for p in group:
            key = p.arch if per_architecture else ""
            if key not in best_before or beats(p.metric_value, best_before[key]):
                best_before[key] = p.metric_value
    return [
        replace(p, practical=False if p.arch == FINAL_ARCH else flags[id(p)]) for p in profiles
    ]


def _exit_metrics(model: MultiExitModel, ds: LabeledImageSet, requested, batch_size: int):
    """One pass over the data evaluating every requested exit and the final
    head; deterministic (dataset order, no shuffling)."""
    sums = {key: 0.0 for key in requested}
    final_sum = 0.0
    n = 0
    model.eval()
    with no_grad():
        for xb, yb in batches(ds, batch_size):
            seqs, logits = model.backbone.forward_collect(xb)
            for location, arch in requested:
                out = model.branch_at(location, arch)(seqs[location - 1])
                sums[(location, arch)] += _metric_sum(model.task, out.data, yb)
            final_sum += _metric_sum(model.task, logits.data, yb)
            n += len(yb)
    return {k: v / n for k, v in sums.items()}, final_sum / n


def _metric_sum(task: str, outputs: np.ndarray, targets: np.ndarray) -> float:
    if task == "classification":
        return float((outputs.argmax(axis=1) == targets).sum())
    return float(np.abs(outputs.reshape(-1) - targets).sum())


def profile_all_exits(
    model: MultiExitModel,
    ds: LabeledImageSet,
    locations: Sequence[int] | None = None,
    archs: Sequence[str] | None = None,
    batch_size: int = 256,
    per_architecture: bool = False,
) -> list[ExitProfile]:
    """Profile every (architecture, location) exit plus the final exit.

    Rows come out location-ascending with architectures in canonical order,
    final exit last, practical flags already set.
    """
    locations = list(locations) if locations is not None else list(range(1, model.config.depth + 1))
    archs = list(archs) if archs is not None else list(ARCHITECTURES)
    requested = []
    for location in locations:
        for arch in archs:
            if arch not in model.branches.get(location, {}):
                raise MissingBranchError(f"no branch {arch!r} at location {location}")
            requested.append((location, arch))

    metrics, final_metric = _exit_metrics(model, ds, requested, batch_size)
    kind = metric_kind(model.task)
    rows = [
        ExitProfile(
            location=location,
            arch=arch,
            metric_kind=kind,
            metric_value=metrics[(location, arch)],
            cumulative_flops=cumulative_flops(model.config, location, arch),
        )
        for location, arch in requested
    ]
    rows = mark_practical(rows, per_architecture=per_architecture)
    rows.append(
        ExitProfile(
            location=model.config.depth,
            arch=FINAL_ARCH,
            metric_kind=kind,
            metric_value=final_metric,
            cumulative_flops=final_exit_flops(model.config),
            practical=False,
        )
    )
    return rows


def write_profiles_csv(profiles: Sequence[ExitProfile], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for p in profiles:
            writer.writerow(
                [
                    p.location,
                    p.arch,
                    p.metric_kind,
                    repr(float(p.metric_value)),
                    p.cumulative_flops,
                    "true" if p.practical else "false",
                ]
            )


def read_profiles_csv(path) -> list[ExitProfile]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected profile CSV header {header}")
        return [
            ExitProfile(
                location=int(row[0]),
                arch=row[1],
                metric_kind=row[2],
                metric_value=float(row[3]),
                cumulative_flops=int(row[4]),
                practical=row[5] == "true",
            )
            for row in reader
        ]


# the CLI-facing name for the CSV emitter
export_profiles = write_profiles_csv
