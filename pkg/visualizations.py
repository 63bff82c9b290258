"""
Visualization module for boxboost
Creates PNG charts of threshold curves, training logs and ablation tables
"""

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from evalbench import ThresholdCurve  # noqa: E402


def _ensure_output_dir(path: str):
    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)


def _save(fig, path: str) -> str:
    _ensure_output_dir(path)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_threshold_curves(curves: Sequence[ThresholdCurve], path: str, title: str = "") -> str:
    """
    Mean Dice against binarization threshold, one line per curve

    Returns:
        Path to saved chart file
    """
    fig, ax = plt.subplots(figsize=(8, 5))
    for curve in curves:
        ax.plot(curve.thresholds, curve.dice, linewidth=2, label=curve.name or None)

    ax.set_xlabel("Threshold", fontsize=12, fontweight="bold")
    ax.set_ylabel("Mean Dice", fontsize=12, fontweight="bold")
    ax.set_title(f"Dice under different thresholds {title}".strip(), fontsize=14, fontweight="bold", pad=20)
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    if any(curve.name for curve in curves):
        ax.legend()
    ax.grid(True, alpha=0.3, linestyle="--")
    return _save(fig, path)


def plot_training_log(frame: pd.DataFrame, path: str) -> str:
    """Total loss and each loss term against optimizer step"""
    fig, ax = plt.subplots(figsize=(10, 5))
    ax.plot(frame["step"], frame["loss"], linewidth=2, color="darkblue", label="total")
    for column in frame.columns:
        if column not in ("step", "epoch", "loss"):
            ax.plot(frame["step"], frame[column], linewidth=1, alpha=0.7, label=column)

    ax.set_xlabel("Step", fontsize=12, fontweight="bold")
    ax.set_ylabel("Loss", fontsize=12, fontweight="bold")
    ax.set_title("Training Loss", fontsize=14, fontweight="bold", pad=20)
    ax.legend()
    ax.grid(True, alpha=0.3, linestyle="--")
    return _save(fig, path)


def plot_ablation(table: pd.DataFrame, path: str) -> str:
    """Grouped bars of mean Dice per setting for both architectures"""
    settings = list(table["setting"])
    x = np.arange(len(settings))
    width = 0.35

    fig, ax = plt.subplots(figsize=(9, 5))
    for offset, arch, color in ((-width / 2, "A", "skyblue"), (width / 2, "B", "lightcoral")):
        bars = ax.bar(x + offset, table[f"{arch}_dice"], width, label=f"Network {arch}",
                      color=color, edgecolor="navy", alpha=0.8)
        for bar in bars:
            height = bar.get_height()
            ax.text(bar.get_x() + bar.get_width() / 2.0, height, f"{height:.3f}",
                    ha="center", va="bottom", fontsize=9)

    ax.set_xticks(x)
    ax.set_xticklabels(settings)
    ax.set_ylabel("Mean Dice (wAVG)", fontsize=12, fontweight="bold")
    ax.set_title("Ablation", fontsize=14, fontweight="bold", pad=20)
    ax.legend()
    ax.grid(axis="y", alpha=0.3, linestyle="--")
    return _save(fig, path)
