"""Matplotlib figures written next to the CSV reports.

SVGs are made byte-reproducible by fixing the hash salt and dropping the
date metadata.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "svg.hashsalt": "ctrscope",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}

CLICK = "#c0392b"
NO_CLICK = "#2e6fb7"


def _new(width=6.0, height=None, nrows=1, ncols=1, **kw):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    height = height or width * golden
    with plt.rc_context(RC):
        return plt.subplots(nrows, ncols, figsize=(width, height), **kw)


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    with plt.rc_context(RC):
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def timeline(series: Mapping[str, tuple[np.ndarray, np.ndarray]], path, metric="AUC", best_step=None):
    fig, ax = _new()
    for name, (steps, vals) in series.items():
        ax.plot(steps, vals, marker="o", ms=2, lw=1, label=name)
    if best_step is not None:
        ax.axvline(best_step, color="0.5", ls="--", lw=0.8)
    ax.set_xlabel("training step")
    ax.set_ylabel(metric)
    ax.legend(ncol=3, frameon=False)
    return save(fig, path)


def score_histograms(hists: Mapping[str, object], path):
    """Positive and negative normalised-score distributions, one line per dataset."""
    fig, axes = _new(width=8.0, height=3.2, ncols=2, sharey=False)
    for name, h in hists.items():
        edges = h.bin_edges[:-1]
        width = edges[1] - edges[0]
        centers = edges[:-1] + 0.5 * width
        for ax, counts in zip(axes, (h.counts_pos, h.counts_neg)):
            frac = counts[:-1] / max(counts.sum(), 1)
            ax.plot(centers, frac, lw=1, label=name)
    axes[0].set_title("clicked")
    axes[1].set_title("non-clicked")
    for ax in axes:
        ax.set_xlabel("pctr / average train CTR")
        ax.set_ylabel("fraction")
        ax.legend(frameon=False)
    return save(fig, path)


def neuron_bars(stats: Mapping[str, object], path, field="mean"):
    names = list(stats)
    fig, axes = _new(width=8.0, height=1.8 * len(names), nrows=len(names), squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        v = getattr(stats[name], field)
        ax.bar(np.arange(len(v)), v, width=0.8, color=NO_CLICK)
        ax.set_ylabel(field)
        ax.set_title(f"layer {stats[name].layer}, {name}")
    axes[-1, 0].set_xlabel("neuron")
    return save(fig, path)


def layer_lines(values: Mapping[str, Mapping[int, float]], path, ylabel, xlabel="layer"):
    fig, ax = _new(width=4.5)
    for name, by_x in values.items():
        xs = sorted(by_x)
        ax.plot(xs, [by_x[x] for x in xs], marker="o", ms=3, lw=1, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)
    return save(fig, path)


def probe_lines(result, path):
    fig, ax = _new(width=5.0)
    xs = np.arange(len(result.days))
    for i, layer in enumerate(result.layers):
        ax.plot(xs, result.auc[i], marker="o", ms=3, lw=1, label=f"layer {layer}")
    ax.set_xticks(xs, result.days)
    ax.set_ylabel("probe AUC")
    ax.legend(frameon=False)
    return save(fig, path)


def saliency_bars(reports: Mapping[str, object], path):
    names = list(reports)
    first = reports[names[0]]
    x = np.arange(len(first.group_ids))
    w = 0.8 / len(names)
    fig, ax = _new(width=7.0)
    for j, name in enumerate(names):
        ax.bar(x + j * w - 0.4 + w / 2, reports[name].scores, width=w, label=name)
    ax.set_xticks(x, first.group_names, rotation=45, ha="right")
    ax.set_ylabel("saliency")
    ax.legend(frameon=False)
    return save(fig, path)


def tsne_scatter(embeddings: Mapping[str, object], path):
    names = list(embeddings)
    fig, axes = _new(width=3.2 * len(names), height=3.2, ncols=len(names), squeeze=False)
    for ax, name in zip(axes[0], names):
        e = embeddings[name]
        lab = e.labels if e.labels is not None else np.zeros(len(e.points))
        neg, pos = lab != 1, lab == 1
        ax.scatter(e.points[neg, 0], e.points[neg, 1], s=2, c=NO_CLICK, lw=0, label="non-clicked")
        ax.scatter(e.points[pos, 0], e.points[pos, 1], s=2, c=CLICK, lw=0, label="clicked")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0, 0].legend(frameon=False, markerscale=3)
    return save(fig, path)
