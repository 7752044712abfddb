"""Figure rendering for CLI runs; all plots go to files, never to a screen."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def loss_curve(epoch_losses, path: str):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(epoch_losses) + 1), epoch_losses, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean token NLL")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def elbow_curve(ks, inertias, chosen_k, path: str):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ks, inertias, marker="o")
    ax.axvline(chosen_k, color="tab:red", linestyle="--", label=f"k = {chosen_k}")
    ax.set_xlabel("k")
    ax.set_ylabel("inertia")
    ax.set_title("elbow selection")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def cluster_scatter(reduced, assignments, names, path: str):
    """First two principal components, one color per cluster."""
    fig, ax = plt.subplots(figsize=(6, 5))
    xs = reduced[:, 0]
    ys = reduced[:, 1] if reduced.shape[1] > 1 else 0 * xs
    ax.scatter(xs, ys, c=assignments, cmap="tab10", s=40)
    for x, y, name in zip(xs, ys, names):
        ax.annotate(name, (x, y), fontsize=7, alpha=0.7)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.set_title("clusters in PC space")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def metric_bars(metrics: dict, path: str):
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(metrics)
    ax.bar(names, [metrics[n] for n in names], color="tab:blue")
    ax.set_ylim(0, 1.05)
    ax.set_title("evaluation metrics")
    for tick in ax.get_xticklabels():
        tick.set_rotation(30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def ensure_dir(path: str):
    os.makedirs(path, exist_ok=True)
    return path
