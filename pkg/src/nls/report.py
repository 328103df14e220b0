"""Figure rendering for the report path.

Both charts are derived from the same records the delimited outputs carry
(the results CSV and the dependency-report JSONL) and are written as PNG
files next to them.
"""

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import aggregate

_METRICS = (("clean_accuracy", "clean", "#4878cf"),
            ("seen_mean", "seen", "#6acc65"),
            ("unseen_mean", "unseen", "#d65f5f"),
            ("corrupted_mean", "corrupted mean", "#b47cc7"))


def render_accuracy_figure(results, path) -> None:
    """Grouped bars of the per-model summary accuracies, seeds averaged."""
    stats = aggregate(results)
    models = sorted(stats)
    metrics = [m for m in _METRICS
               if any(stats[mod][m[0]] is not None for mod in models)]
    x = np.arange(len(models))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(models), 3.6))
    for i, (key, label, color) in enumerate(metrics):
        vals = [stats[m][key] if stats[m][key] is not None else np.nan
                for m in models]
        ax.bar(x + (i - (len(metrics) - 1) / 2) * width, vals, width,
               label=label, color=color)
    ax.set_xticks(x)
    ax.set_xticklabels(models)
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8, loc="lower right")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_dep_degree_figure(records, path) -> None:
    """One bar per probe record; -inf precision shows as a labeled gap."""
    if not records:
        raise ValueError("no dependency records to plot")
    labels, values = [], []
    for rec in records:
        tag = rec.get("label")
        labels.append(f"{tag}\n{rec['factor']}" if tag else rec["factor"])
        values.append(rec["dep_degree"])
    x = np.arange(len(records))
    fig, ax = plt.subplots(figsize=(2.0 + 0.9 * len(records), 3.6))
    finite = [v if math.isfinite(v) else np.nan for v in values]
    ax.bar(x, finite, 0.6, color="#4878cf")
    for i, v in enumerate(values):
        if not math.isfinite(v):
            ax.text(i, 0.02, "-inf", ha="center", fontsize=8, rotation=90)
    ax.axhline(0.0, color="k", linewidth=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("dependency degree (ln prec/chance)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
