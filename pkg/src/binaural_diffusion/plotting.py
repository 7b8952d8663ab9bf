"""Matplotlib figures written next to the text reports.

All figures go through the Agg backend and are saved without a software
stamp so repeated runs produce identical files.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 0.8,
    "svg.hashsalt": "binaural",
}
_SAVE = {"dpi": 110, "metadata": {"Software": None}}
CHANNEL_NAMES = ("left", "right")


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_waveforms(pred, ref, sample_rate, path, title=""):
    """Overlay predicted and reference waveforms, one panel per channel."""
    pred = np.atleast_2d(pred)
    ref = np.atleast_2d(ref)
    t = np.arange(ref.shape[1]) / sample_rate
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(ref.shape[0], 1, figsize=(8, 2.2 * ref.shape[0]), sharex=True, squeeze=False)
        for i, ax in enumerate(axes[:, 0]):
            ax.plot(t, ref[i], color="0.3", label="reference")
            ax.plot(t, pred[i], color="tab:orange", alpha=0.8, label="prediction")
            ax.set_ylabel(CHANNEL_NAMES[i] if ref.shape[0] == 2 else "amplitude")
        axes[0, 0].legend(loc="upper right", frameon=False)
        axes[-1, 0].set_xlabel("time [s]")
        if title:
            axes[0, 0].set_title(title)
        return _save(fig, path)


def plot_error(pred, ref, sample_rate, path, title=""):
    """Sample-wise error (prediction minus reference) per channel."""
    err = np.atleast_2d(pred) - np.atleast_2d(ref)
    t = np.arange(err.shape[1]) / sample_rate
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(err.shape[0], 1, figsize=(8, 1.8 * err.shape[0]), sharex=True, squeeze=False)
        for i, ax in enumerate(axes[:, 0]):
            ax.plot(t, err[i], color="tab:red")
            ax.set_ylabel(f"error ({CHANNEL_NAMES[i]})" if err.shape[0] == 2 else "error")
        axes[-1, 0].set_xlabel("time [s]")
        if title:
            axes[0, 0].set_title(title)
        return _save(fig, path)


def plot_metric_report(report, path):
    """One bar panel per metric, clips along the x axis."""
    names = [n for n, _ in report.rows]
    keys = list(report.rows[0][1]) if report.rows else []
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, max(1, len(keys)), figsize=(2.6 * max(1, len(keys)), 2.8), squeeze=False)
        for ax, key in zip(axes[0], keys):
            vals = [m[key] for _, m in report.rows]
            ax.bar(range(len(vals)), vals, color="tab:blue")
            ax.axhline(report.aggregate[key], color="k", linestyle="--", linewidth=0.8)
            ax.set_xticks(range(len(vals)), names, rotation=60, fontsize=7)
            ax.set_title(key)
        fig.tight_layout()
        return _save(fig, path)


def plot_loss(history, path, width=50):
    steps = np.array([s for s, _ in history])
    losses = np.array([l for _, l in history])
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(steps, losses, color="0.7", label="per step")
        if len(losses) >= width:
            smooth = np.convolve(losses, np.ones(width) / width, mode="valid")
            ax.plot(steps[width - 1:], smooth, color="tab:blue", label=f"mean of {width}")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("noise MSE")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
