"""Report figures (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..degrade import CATEGORIES, NUM_NOISE_CLASSES  # noqa: E402


def plot_ablation(table, path, metric: str = "si_sdr_db") -> Path:
    """Grouped bars: per-category mean of ``metric`` for every variant."""
    variants = []
    for r in table.rows:
        if r["variant"] not in variants:
            variants.append(r["variant"])
    cats = [c.value for c in CATEGORIES] + ["overall"]
    fig, ax = plt.subplots(figsize=(11, 4))
    width = 0.8 / max(len(variants), 1)
    x = np.arange(len(cats))
    for i, v in enumerate(variants):
        means = []
        for c in cats:
            vals = [r["mean"] for r in table.rows if r["variant"] == v and r["category"] == c
                    and r["metric"] == metric and r["mean"] is not None]
            means.append(np.mean(vals) if vals else np.nan)
        ax.bar(x + i * width - 0.4 + width / 2, means, width, label=v)
    ax.set_xticks(x)
    ax.set_xticklabels(cats, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("SI-SDR (dB)" if metric == "si_sdr_db" else metric)
    ax.axhline(0, color="k", lw=0.5)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_heads(rows, path) -> Path:
    """Confusion matrix of the noise head plus scatter plots for both regression heads."""
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    conf = np.zeros((NUM_NOISE_CLASSES, NUM_NOISE_CLASSES))
    for r in rows:
        conf[r["true_noise_class"], r["pred_noise_class"]] += 1
    axes[0].imshow(conf, cmap="Blues")
    axes[0].set_xlabel("predicted class")
    axes[0].set_ylabel("true class")
    axes[0].set_title("noise head")
    for ax, key, title in ((axes[1], "t60", "T60 (s)"), (axes[2], "alpha_norm", "normalised alpha")):
        t = [r[f"true_{key}"] for r in rows]
        p = [r[f"pred_{key}"] for r in rows]
        ax.scatter(t, p, s=10)
        lo, hi = min(t + p), max(t + p)
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_xlabel("true")
        ax.set_ylabel("predicted")
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_training_curve(log_rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in log_rows]
    for key in ("score", "total"):
        ax.plot(steps, [r[key] for r in log_rows], label=key)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
