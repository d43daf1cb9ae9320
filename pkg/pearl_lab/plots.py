"""Figures for compare: ASR against the threshold, and error against shots."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def plot_asr_vs_delta(asr_vs_delta: pd.DataFrame, path: Path) -> Path:
    """One panel per shot count, one line per compared run."""
    shots = sorted(asr_vs_delta["shots"].unique())
    fig, axes = plt.subplots(1, len(shots), figsize=(4 * len(shots), 4), sharey=True, squeeze=False)
    for ax, n in zip(axes[0], shots):
        panel = asr_vs_delta[asr_vs_delta["shots"] == n]
        for label, rows in panel.groupby("label", sort=False):
            ax.plot(rows["delta"], rows["asr"], marker="o", label=label)
        ax.set_title(f"{n}-shot")
        ax.set_xlabel("Threshold δ")
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("Attack success rate (exhaustive)")
    axes[0][-1].legend()
    plt.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_worst_vs_shots(comparison: pd.DataFrame, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in comparison.groupby("label", sort=False):
        line = ax.plot(rows["shots"], rows["worst"], marker="o", label=f"{label} worst")
        ax.plot(
            rows["shots"],
            rows["avg"],
            marker="x",
            linestyle="--",
            color=line[0].get_color(),
            label=f"{label} avg",
        )
    ax.set_xlabel("Demonstrations")
    ax.set_ylabel("Normalized squared error")
    ax.set_title("Average vs worst-case order")
    ax.set_xticks(sorted(comparison["shots"].unique()))
    ax.legend()
    plt.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.savefig(path, dpi=150)
    plt.close(fig)
    return path
