"""Render the exit-profile figure: metric vs cumulative FLOPs per
architecture, practical exits circled, final exit as a reference line."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .profiling import FINAL_ARCH, ExitProfile

__all__ = ["render_profile_figure", "emit_plot_script"]

_MARKERS = ("o", "s", "^", "v", "D", "P", "X")


def render_profile_figure(profiles: Sequence[ExitProfile], out_path, title: str | None = None) -> None:
    """Draw one curve per branch architecture over cumulative GFLOPs and
    save the figure to ``out_path`` (format from the suffix)."""
    branch_rows = [p for p in profiles if p.arch != FINAL_ARCH]
    final_rows = [p for p in profiles if p.arch == FINAL_ARCH]
    if not branch_rows:
        raise ValueError("no branch profiles to plot")
    kind = branch_rows[0].metric_kind

    fig, ax = plt.subplots(figsize=(7.5, 5))
    archs = sorted({p.arch for p in branch_rows}, key=lambda a: min(
        p.cumulative_flops for p in branch_rows if p.arch == a))
    for i, arch in enumerate(archs):
        rows = sorted((p for p in branch_rows if p.arch == arch), key=lambda p: p.location)
        x = [p.cumulative_flops / 1e9 for p in rows]
        y = [p.metric_value for p in rows]
        ax.plot(x, y, marker=_MARKERS[i % len(_MARKERS)], markersize=5, linewidth=1.2, label=arch)
    practical = [p for p in branch_rows if p.practical]
    if practical:
        ax.scatter(
            [p.cumulative_flops / 1e9 for p in practical],
            [p.metric_value for p in practical],
            s=160,
            facecolors="none",
            edgecolors="black",
            linewidths=1.2,
            zorder=5,
            label="practical",
        )
    for p in final_rows:
        ax.axhline(p.metric_value, color="gray", linestyle="--", linewidth=1, label="final exit")
    ax.set_xlabel("cumulative GFLOPs")
    ax.set_ylabel(kind)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


_SCRIPT_TEMPLATE = '''#!/usr/bin/env python3
"""Self-contained exit-profile plot (generated)."""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

# location, arch, metric_kind, metric_value, cumulative_flops, practical
ROWS = {rows!r}

OUT = {out!r}

branch_rows = [r for r in ROWS if r[1] != "final"]
archs = sorted({{r[1] for r in branch_rows}})
fig, ax = plt.subplots(figsize=(7.5, 5))
for arch in archs:
    pts = sorted((r for r in branch_rows if r[1] == arch), key=lambda r: r[0])
    ax.plot([r[4] / 1e9 for r in pts], [r[3] for r in pts], marker="o", markersize=4, label=arch)
practical = [r for r in branch_rows if r[5]]
if practical:
    ax.scatter([r[4] / 1e9 for r in practical], [r[3] for r in practical],
               s=160, facecolors="none", edgecolors="black", zorder=5, label="practical")
for r in ROWS:
    if r[1] == "final":
        ax.axhline(r[3], color="gray", linestyle="--", linewidth=1, label="final exit")
ax.set_xlabel("cumulative GFLOPs")
ax.set_ylabel(ROWS[0][2] if ROWS else "metric")
ax.grid(True, alpha=0.3)
ax.legend(fontsize=8)
fig.tight_layout()
fig.savefig(OUT, dpi=150)
print("wrote", OUT)
'''


def emit_plot_script(profiles: Sequence[ExitProfile], out_path, figure_path: str = "profiles.png") -> None:
    """Write a standalone script that reproduces the profile figure; the
    profile rows are embedded so the script has no data dependency."""
    if not profiles:
        raise ValueError("no profiles to emit")
    rows = [
        (p.location, p.arch, p.metric_kind, float(p.metric_value), p.cumulative_flops, p.practical)
        for p in profiles
    ]
    with open(out_path, "w") as f:
        f.write(_SCRIPT_TEMPLATE.format(rows=rows, out=str(figure_path)))
