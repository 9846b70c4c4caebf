"""Matplotlib rendering of evaluation reports.

Figures are written next to the delimited output files: per-task coverage
and set-size distributions across schemes, plus a training-curve plot.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def render_comparison(reports, out_dir, fname: str = "comparison.png") -> str:
    """Side-by-side boxplots of per-task coverage and mean set size."""
    os.makedirs(out_dir, exist_ok=True)
    labels = [r.scheme for r in reports]
    fig, (ax_cov, ax_size) = plt.subplots(1, 2, figsize=(11, 4.2))
    ax_cov.boxplot([r.task_coverage for r in reports], tick_labels=labels,
                   showmeans=True)
    if reports:
        ax_cov.axhline(1.0 - reports[0].alpha, color="tab:red", ls="--", lw=1,
                       label=f"target {1.0 - reports[0].alpha:g}")
        ax_cov.legend(loc="lower right", fontsize=8)
    ax_cov.set_ylabel("per-task coverage")
    ax_cov.tick_params(axis="x", rotation=30)
    ax_size.boxplot([r.task_set_size for r in reports], tick_labels=labels,
                    showmeans=True)
    ax_size.set_ylabel("per-task mean set size")
    ax_size.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    path = os.path.join(out_dir, fname)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_training_log(log, out_dir, fname: str = "training.png") -> str:
    """Loss / validation metric / learning-rate curves from a training log."""
    os.makedirs(out_dir, exist_ok=True)
    epochs = [rec["epoch"] for rec in log]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(epochs, [rec["loss"] for rec in log], label="train loss")
    if log and "val_metric" in log[0]:
        ax.plot(epochs, [rec["val_metric"] for rec in log], label="val metric")
    ax.set_xlabel("epoch")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    ax2 = ax.twinx()
    ax2.plot(epochs, [rec["lr"] for rec in log], color="tab:gray", lw=0.8,
             label="lr")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    path = os.path.join(out_dir, fname)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
