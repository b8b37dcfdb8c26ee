"""Report figures rendered next to the metrics/CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cost import relative_memory_cost  # noqa: E402


def setup_style():
    plt.rcParams.update({
        "font.size": 10,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "figure.dpi": 100,
        "savefig.bbox": "tight",
    })


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(records, path):
    """Accuracy (final and best-so-far) and per-layer local loss against epoch."""
    setup_style()
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.5))
    if records:
        epochs = [r.epoch for r in records]
        ax_acc.plot(epochs, [r.accuracy for r in records], marker="o", label="accuracy")
        ax_acc.plot(epochs, [r.best_accuracy for r in records], ls="--", label="best")
        losses = np.array([r.loss for r in records])
        for i in range(losses.shape[1]):
            ax_loss.plot(epochs, losses[:, i], marker=".", label=f"layer {i + 1}")
        ax_acc.legend()
        ax_loss.legend()
    ax_acc.set(xlabel="epoch", ylabel=f"{records[0].split if records else ''} accuracy", ylim=(0, 1.02))
    ax_loss.set(xlabel="epoch", ylabel="mean local loss per step")
    return _save(fig, path)


def plot_silhouette(scores, path):
    setup_style()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    layers = np.arange(1, len(scores) + 1)
    ax.bar(layers, scores, color="tab:purple")
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set(xlabel="hidden layer", ylabel="silhouette (final input traces)", xticks=layers,
           ylim=(min(-0.1, min(scores, default=0) - 0.05), 1.0))
    return _save(fig, path)


def plot_relative_memory_cost(batches, classes, path):
    """TESS/TP memory ratio ``(3B + O)/4B`` over output classes, one line per batch size."""
    setup_style()
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    o = np.asarray(sorted(classes), dtype=float)
    for b in sorted(batches):
        ax.plot(o, [relative_memory_cost(int(b), int(k)) for k in o], marker="o", label=f"B={b}")
    ax.axhline(1.0, color="k", lw=0.8, ls=":")
    if o.min() > 0 and o.max() / o.min() > 20:
        ax.set_xscale("log")
    ax.set(xlabel="output classes O", ylabel="relative memory cost (TESS / TP)")
    ax.legend()
    return _save(fig, path)


def plot_finetune(reports, path):
    """Query accuracy before/after fine-tuning for each k-shot setting."""
    setup_style()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(len(reports))
    ax.bar(x - 0.2, [r.query_before for r in reports], 0.4, color="0.6", label="before")
    ax.bar(x + 0.2, [r.query_after for r in reports], 0.4, color="tab:green", label="after")
    ax.set_xticks(x, [f"k={r.k}" for r in reports])
    ax.set(ylabel="query accuracy", ylim=(0, 1.02))
    ax.legend()
    return _save(fig, path)
