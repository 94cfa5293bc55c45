"""Report figures written to PNG files with the Agg backend."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_traces(traces: dict, path, keys=("total", "l_cg", "l_fg", "l_m")):
    """One panel per loss component, one line per run."""
    keys = [k for k in keys if any(k in row for tr in traces.values() for row in tr)]
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 3), squeeze=False)
    for ax, key in zip(axes[0], keys):
        for name, trace in traces.items():
            if trace:
                ax.plot([r["epoch"] for r in trace], [r[key] for r in trace], marker="o", label=name)
        ax.set_title(key)
        ax.set_xlabel("epoch")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows: dict, path, metrics=("fine_map50", "fine_corloc", "coarse_map50")):
    """Grouped bars: metric groups on the x axis, one bar per run."""
    names = list(rows)
    x = np.arange(len(metrics))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for i, name in enumerate(names):
        vals = [100 * rows[name].get(m, 0.0) for m in metrics]
        ax.bar(x + (i - (len(names) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(metrics)
    ax.set_ylabel("points")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7, ncol=len(names))
    fig.tight_layout()
    return _save(fig, path)


def plot_per_class_ap(ap: dict, path, title=""):
    labels = list(ap)
    fig, ax = plt.subplots(figsize=(max(4, 0.25 * len(labels)), 3.5))
    ax.bar(np.arange(len(labels)), [ap[k] for k in labels])
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels, rotation=90, fontsize=6)
    ax.set_ylim(0, 1)
    ax.set_ylabel("AP@0.5")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
