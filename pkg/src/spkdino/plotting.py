"""Report figures.  Each writer renders one PNG with the Agg backend."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def score_histogram(path, scores, labels, normed=None):
    """Target vs non-target score distributions, raw and (optionally) AS-normed."""
    labels = np.asarray(labels, dtype=bool)
    panels = [("cosine", np.asarray(scores))]
    if normed is not None:
        panels.append(("AS-norm", np.asarray(normed)))
    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 3.5), squeeze=False)
    for ax, (title, s) in zip(axes[0], panels):
        bins = np.linspace(s.min(), s.max(), 40) if s.max() > s.min() else 10
        ax.hist(s[~labels], bins=bins, alpha=0.6, density=True, label="non-target")
        ax.hist(s[labels], bins=bins, alpha=0.6, density=True, label="target")
        ax.set_title(title)
        ax.set_xlabel("score")
        ax.legend(frameon=False)
    return _save(fig, path)


def training_curves(path, logd):
    """Loss, teacher entropy against the collapse bands, and the schedules."""
    step = logd["step"]
    log_k = math.log(int(logd["meta"]["out_dim"])) if "out_dim" in logd["meta"] else None
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    axes[0].plot(step, logd["loss"], lw=0.8)
    axes[0].set_ylabel("loss")
    axes[1].plot(step, logd["entropy"], lw=0.8, label="teacher entropy")
    if log_k is not None:
        for frac, style in ((1.0, "-"), (0.95, "--"), (0.05, "--")):
            axes[1].axhline(frac * log_k, color="grey", ls=style, lw=0.7)
    axes[1].set_ylabel("nats")
    axes[1].legend(frameon=False)
    axes[2].plot(step, logd["tau_t"], label="teacher temp")
    axes[2].plot(step, 1.0 - logd["lambda"], label="1 - ema")
    axes[2].plot(step, logd["lr"], label="lr")
    axes[2].set_yscale("log")
    axes[2].set_xlabel("step")
    axes[2].legend(frameon=False)
    return _save(fig, path)


def ablation_bars(path, names, values, metric="eer_percent"):
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(names)), 3.5))
    x = np.arange(len(names))
    ax.bar(x, values, color="tab:blue")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel(metric)
    return _save(fig, path)
