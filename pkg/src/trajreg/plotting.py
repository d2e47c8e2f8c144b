"""Figure rendering for the command-line reports.

Every function draws one figure to a file (format from the suffix) and
returns the path. Uses the object-oriented matplotlib API, so no global
pyplot state or display is involved.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

__all__ = [
    "plot_metric_report",
    "plot_loss_history",
    "plot_registration_traces",
    "plot_trajectory",
]


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100)
    return path


def plot_metric_report(report, path, title: str = "") -> Path:
    """Grouped bars of DSC and TO per label, ASSD on a second panel."""
    labels = [s.label for s in report.scores]
    x = np.arange(len(labels))
    fig = Figure(figsize=(7, 3.2))
    ax, ax2 = fig.subplots(1, 2)
    dsc = [s.dsc for s in report.scores]
    to = [np.nan if s.to is None else s.to for s in report.scores]
    ax.bar(x - 0.2, dsc, 0.4, label="DSC")
    ax.bar(x + 0.2, to, 0.4, label="TO")
    ax.set_xticks(x, [str(l) for l in labels])
    ax.set_ylim(0, 1.25)
    ax.set_yticks(np.linspace(0, 1, 6))
    ax.set_xlabel("label")
    ax.legend(loc="upper center", ncols=2, frameon=False)
    dist = [np.nan if s.assd_mm is None else s.assd_mm for s in report.scores]
    ax2.bar(x, dist, 0.5, color="tab:gray")
    ax2.set_xticks(x, [str(l) for l in labels])
    ax2.set_xlabel("label")
    ax2.set_ylabel("ASSD (mm)")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_history(histories, path, names=None) -> Path:
    """Per-epoch mean SSD loss, one curve per history, log scale."""
    if histories and np.isscalar(histories[0]):
        histories = [histories]
    fig = Figure(figsize=(5, 3.2))
    ax = fig.subplots()
    for i, h in enumerate(histories):
        name = names[i] if names else f"run {i + 1}"
        ax.plot(np.arange(1, len(h) + 1), h, marker="o", ms=3, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean patch SSD")
    if len(histories) > 1 or names:
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_registration_traces(traces, path) -> Path:
    """Mean squared difference per iteration for each registration step.

    ``traces`` is a list of per-step traces, each a list of per-level lists
    (coarse to fine), as stored in the guided-registration result.
    """
    fig = Figure(figsize=(5.5, 3.2))
    ax = fig.subplots()
    for i, step in enumerate(traces):
        flat = [v for level in step for v in level]
        ax.plot(flat, label=f"step {i + 1}")
    ax.set_yscale("log")
    ax.set_xlabel("iteration (all pyramid levels)")
    ax.set_ylabel("MSE")
    if len(traces) <= 8:
        ax.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_trajectory(images, path, scores=None, axis: int = 2) -> Path:
    """Middle slice of every trajectory image side by side."""
    n = len(images)
    fig = Figure(figsize=(2.2 * n, 2.8), layout="constrained")
    axes = np.atleast_1d(fig.subplots(1, n))
    for k, (ax, vol) in enumerate(zip(axes, images)):
        data = vol.data
        sl = np.take(data, data.shape[axis] // 2, axis=axis)
        ax.imshow(sl.T, cmap="gray", origin="lower")
        ax.set_axis_off()
        title = f"level {k}"
        if scores is not None:
            title += f"\n{scores[k]:.3f}"
        ax.set_title(title, fontsize="small")
    return _save(fig, path)
