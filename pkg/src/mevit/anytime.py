"""Anytime inference: run exits in depth order, keep the latest result,
answer a fixed FLOPs budget or a cooperative interrupt with the deepest
completed exit.

Interrupts are a flag polled between layer evaluations, never mid-op, so
response latency is bounded by one layer plus one branch and results stay
well defined. One producer sets the flag; the inference worker polls it.
Model weights are read-only during anytime runs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .flops import cumulative_flops, final_exit_flops
from .multi_exit import MultiExitModel
from .profiling import FINAL_ARCH, ExitProfile
from .tensor import Tensor, no_grad

__all__ = [
    "BudgetPolicy",
    "AnytimeResult",
    "NoExitCompletedError",
    "select_exit",
    "exit_schedule",
    "run_anytime",
    "timer_interrupt",
]


class NoExitCompletedError(RuntimeError):
    """No exit fit the budget (or the interrupt fired before the first)."""


@dataclass
class BudgetPolicy:
    """Either a fixed FLOPs budget or an interrupt predicate, not both."""

    budget_flops: int | None = None
    interrupt: Callable[[], bool] | None = None

    def __post_init__(self):
        if (self.budget_flops is None) == (self.interrupt is None):
            raise ValueError("specify exactly one of budget_flops or interrupt")
        if self.budget_flops is not None and self.budget_flops < 0:
            raise ValueError("budget_flops must be nonnegative")

    def interrupted(self) -> bool:
        return self.interrupt is not None and bool(self.interrupt())


@dataclass
class AnytimeResult:
    prediction: np.ndarray
    exit_location: int
    exit_arch: str
    flops_spent: int
    exits_evaluated: int


def timer_interrupt(after_ms: float) -> Callable[[], bool]:
    """Wall-clock adapter: a flag that flips after ``after_ms`` milliseconds.

    The timer starts immediately; use right before calling run_anytime.
    """
    flag = threading.Event()
    timer = threading.Timer(after_ms / 1000.0, flag.set)
    timer.daemon = True
    timer.start()
    return flag.is_set


def select_exit(profiles: Sequence[ExitProfile], budget: int) -> int | None:
    """Deepest exit whose cumulative FLOPs fit the budget (inclusive);
    None when even the cheapest exceeds it."""
    if not profiles:
        raise ValueError("select_exit: empty profile list")
    affordable = [p for p in profiles if p.cumulative_flops <= budget]
    if not affordable:
        return None
    return max(affordable, key=lambda p: p.cumulative_flops).location


def exit_schedule(model: MultiExitModel) -> list[tuple[int, str, int]]:
    """(location, arch, cumulative FLOPs) per exit in depth order, final
    exit included. Requires at most one branch per location."""
    schedule = []
    for location in model.branch_locations():
        at_loc = model.branches[location]
        if len(at_loc) != 1:
            raise ValueError(
                f"anytime inference needs one branch per location; location {location} has "
                f"{sorted(at_loc)}"
            )
        arch = next(iter(at_loc))
        schedule.append((location, arch, cumulative_flops(model.config, location, arch)))
    schedule.append((model.config.depth, FINAL_ARCH, final_exit_flops(model.config)))
    return schedule


def run_anytime(model: MultiExitModel, images, policy: BudgetPolicy) -> AnytimeResult:
    """Evaluate layers in order, compute each attached branch as its layer
    completes, and return the deepest completed exit.

    Under a fixed budget no layer is entered unless some affordable exit
    lies at or beyond it, so the result matches evaluating the selected
    exit directly. Reported FLOPs are the cumulative cost of the exit used.
    """
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=np.float64))
    single = images.ndim == 3
    if single:
        images = images.reshape((1,) + images.shape)

    schedule = exit_schedule(model)
    budget = policy.budget_flops
    retained: tuple[np.ndarray, int, str, int] | None = None
    evaluated = 0

    model.eval()
    with no_grad():
        x = model.backbone.patch_embed(images, None)
        next_exit = 0
        for depth in range(1, model.config.depth + 1):
            if budget is not None:
                ahead = [cost for loc, _, cost in schedule[next_exit:] if loc >= depth]
                if not ahead or min(ahead) > budget:
                    break
            x = model.backbone.layers[depth - 1](x, None)
            while next_exit < len(schedule) and schedule[next_exit][0] == depth:
                location, arch, cost = schedule[next_exit]
                if budget is None or cost <= budget:
                    if arch == FINAL_ARCH:
                        out = model.backbone.head_logits(x)
                    else:
                        out = model.branch_at(location, arch)(x)
                    retained = (out.data, location, arch, cost)
                    evaluated += 1
                next_exit += 1
            if policy.interrupted():
                break

    if retained is None:
        raise NoExitCompletedError(
            "no exit completed: budget below the first exit"
            if budget is not None
            else "no exit completed before the interrupt"
        )
    prediction, location, arch, cost = retained
    if single:
        prediction = prediction[0]
    return AnytimeResult(prediction.copy(), location, arch, cost, evaluated)
