"""Matplotlib figures for learning curves and ablation tables.

Everything renders off-screen with the Agg backend and writes vector
graphics (SVG or PDF, chosen from the file suffix).
"""
from __future__ import annotations

import re
from collections import OrderedDict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "mddlab",  # stable element ids, so identical data gives identical files
    "svg.fonttype": "none",
}


def figsize(scale=1.0, ratio=0.62):
    width = 5.5 * scale
    return width, width * ratio


def _runs(records, phase="adapt"):
    runs = OrderedDict()
    for r in records:
        if phase is None or r.phase == phase:
            runs.setdefault(r.run_id, []).append(r)
    for rs in runs.values():
        rs.sort(key=lambda r: r.epoch)
    return runs


def plot_learning_curves(records, path, title=None, phase="adapt"):
    """One line of target Dice per run, ending at the epoch where the run stopped.

    Early-stopped runs get a marker on their final point.
    """
    runs = _runs(records, phase)
    if not runs:
        runs = _runs(records, None)
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        for i, (run_id, rs) in enumerate(runs.items()):
            xs = [r.epoch for r in rs]
            ys = [r.dice_mean for r in rs]
            (line,) = ax.plot(xs, ys, lw=1.4, label=str(run_id), gid=f"run{i}")
            if rs[-1].stopped:
                ax.plot(xs[-1], ys[-1], "o", ms=4, color=line.get_color())
        ax.set_xlabel("epoch")
        ax.set_ylabel("target Dice")
        ax.set_ylim(0, 1)
        if title:
            ax.set_title(title)
        if len(runs) > 1 or title is None:
            ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
        plt.close(fig)
    return path


def count_lines(path):
    """Number of run lines in an SVG written by :func:`plot_learning_curves`."""
    return len(re.findall(r'<g id="run\d+"', Path(path).read_text()))


def plot_ablation(table, probe_epochs, path):
    """Grouped bars: target Dice per freeze configuration at each probe epoch."""
    path = Path(path)
    names = list(table)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.2, 0.55))
        width = 0.8 / max(len(probe_epochs), 1)
        for k, e in enumerate(probe_epochs):
            xs = [i + (k - (len(probe_epochs) - 1) / 2) * width for i in range(len(names))]
            ax.bar(xs, [table[n][e] for n in names], width=width, label=f"epoch {e}")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel("target Dice")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
        plt.close(fig)
    return path
