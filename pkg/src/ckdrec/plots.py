"""Figures written next to the tab-separated reports."""

from __future__ import annotations

import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    # fixed metadata keeps PNG bytes reproducible
    "savefig.dpi": 100,
}


def _save(fig, path: str | os.PathLike) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training(history, path: str | os.PathLike) -> None:
    """Loss terms and validation NDCG@10 per epoch; curriculum stages shaded."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(8.0, 3.0))
        epochs = [r.epoch for r in history]
        ax_loss.plot(epochs, [r.ce for r in history], label="cross-entropy")
        if any(r.kd for r in history):
            ax_loss.plot(epochs, [r.kd for r in history], label="KL")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_loss.legend()
        ax_val.plot(epochs, [r.valid_ndcg for r in history], color="C2", label="valid NDCG@10")
        ax_val.plot(epochs, [r.valid_recall for r in history], color="C3", ls="--", label="valid Recall@10")
        staged = [r.epoch for r in history if r.stage > 0]
        for ax in (ax_loss, ax_val):
            if staged:
                ax.axvspan(min(staged) - 0.5, max(staged) + 0.5, color="0.9", zorder=0)
        ax_val.set_xlabel("epoch")
        ax_val.legend()
        _save(fig, path)


def plot_sweep(values: Sequence[float], metrics: Mapping[str, Sequence[float]], param: str,
               path: str | os.PathLike) -> None:
    """One line per metric against a swept hyperparameter (log axis when spanning decades)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = np.asarray(values, dtype=float)
        for name, ys in metrics.items():
            ax.plot(xs, ys, marker="o", label=name)
        if np.all(xs > 0) and xs.max() / xs.min() >= 100:
            ax.set_xscale("log")
        ax.set_xlabel(param)
        ax.set_ylabel("test metric")
        ax.legend()
        _save(fig, path)


def plot_ablation(names: Sequence[str], means: Sequence[float], errors: Sequence[float],
                  path: str | os.PathLike, metric: str = "NDCG@10") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        pos = np.arange(len(names))
        ax.bar(pos, means, yerr=errors, capsize=3, color=["C0"] + ["C7"] * (len(names) - 1))
        ax.set_xticks(pos)
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel(metric)
        lo = min(m - e for m, e in zip(means, errors))
        ax.set_ylim(max(0.0, lo * 0.9), None)
        _save(fig, path)
