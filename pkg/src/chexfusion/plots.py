"""Matplotlib figure rendering for training logs, evaluation reports, and
ablation tables.  All figures go to files (Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

GROUP_COLORS = {"head": "#2b6cb0", "medium": "#d69e2e", "tail": "#c53030", "": "#718096"}


def training_curves(log, path):
    """Loss and validation mAP per epoch, side by side."""
    epochs = [r["epoch"] for r in log]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].plot(epochs, [r["train_loss"] for r in log], marker="o")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("train loss")
    axes[1].plot(epochs, [r["val_map_total"] for r in log], marker="o", label="total")
    for g in ("head", "medium", "tail"):
        vals = [r.get(f"val_map_{g}") for r in log]
        if all(v is not None for v in vals):
            axes[1].plot(epochs, vals, marker=".", label=g, color=GROUP_COLORS[g])
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("val mAP")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def per_class_ap_bar(report, path):
    """Per-class AP bars colored by head/medium/tail group."""
    rows = [r for r in report["per_class"] if r["ap"] is not None]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(rows)), 3.6))
    ax.bar(range(len(rows)), [r["ap"] for r in rows],
           color=[GROUP_COLORS[r["group"]] for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["name"] for r in rows], rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("average precision")
    ax.set_title(f"mAP total {report['map_total']:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def comparison_bar(names, values, ylabel, path):
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(names)), 3.6))
    ax.bar(range(len(names)), values, color="#2b6cb0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
