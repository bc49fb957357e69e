"""Figure rendering for report commands.

Each report path can emit a PNG next to its delimited output. Rendering is
deterministic: the Agg backend, fixed metadata, and no timestamps, so
repeated runs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_SAVEFIG_KW = {"dpi": 120, "metadata": {"Software": "geoprompt"}}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)
    return path


def plot_strategy_summary(balanced_by_strategy: Mapping[str, float], path,
                          title: str = "Zero-shot balanced accuracy") -> Path:
    """Bar chart of balanced top-1 accuracy per prompting strategy."""
    names = list(balanced_by_strategy)
    values = [balanced_by_strategy[n] * 100.0 for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bars = ax.bar(names, values, color="#4878a8")
    ax.bar_label(bars, fmt="%.1f", fontsize=8)
    ax.set_ylabel("balanced top-1 (%)")
    ax.set_ylim(0, 105)
    ax.set_title(title)
    ax.tick_params(axis="x", labelrotation=20)
    fig.tight_layout()
    return _save(fig, path)


def plot_group_bars(groups: Mapping[str, float], path,
                    title: str = "Balanced accuracy by group") -> Path:
    names = list(groups)
    values = [groups[n] * 100.0 for n in names]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(names) + 2), 3.5))
    bars = ax.bar(names, values, color="#6aa66a")
    ax.bar_label(bars, fmt="%.1f", fontsize=8)
    ax.set_ylabel("balanced top-1 (%)")
    ax.set_ylim(0, 105)
    ax.set_title(title)
    ax.tick_params(axis="x", labelrotation=20)
    fig.tight_layout()
    return _save(fig, path)


def plot_fewshot_curve(shots: Sequence[int], curve_acc: Sequence[float],
                       reference_acc: float, path,
                       title: str = "Target-trained few-shot vs. regularized source model"
                       ) -> Path:
    """The few-shot comparison: target-trained curve against the horizontal
    source-only regularized reference."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(shots, [a * 100.0 for a in curve_acc], marker="o", color="#3566a5",
            label="target-trained (per-class shots)")
    ax.axhline(reference_acc * 100.0, color="#3a8c3a", linestyle="--",
               label="source-only, knowledge-regularized")
    ax.set_xlabel("target shots per class")
    ax.set_ylabel("target balanced top-1 (%)")
    ax.set_xticks(list(shots))
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_correlations(rows_by_strategy: Mapping[str, Sequence], path,
                      title: str = "Embedding distance vs. country statistics"
                      ) -> Path:
    """Horizontal bars of Pearson's rho per statistic, one group per strategy."""
    strategies = list(rows_by_strategy)
    stats: list[str] = []
    for rows in rows_by_strategy.values():
        for r in rows:
            if r.statistic not in stats:
                stats.append(r.statistic)
    fig, ax = plt.subplots(figsize=(6, 0.45 * len(stats) * max(1, len(strategies)) + 1.5))
    height = 0.8 / max(1, len(strategies))
    for si, strategy in enumerate(strategies):
        index = {r.statistic: r for r in rows_by_strategy[strategy]}
        ys = [i + si * height for i in range(len(stats))]
        vals = [index[s].rho if s in index else 0.0 for s in stats]
        ax.barh(ys, vals, height=height, label=strategy)
    ax.set_yticks([i + 0.4 for i in range(len(stats))])
    ax.set_yticklabels(stats, fontsize=8)
    ax.axvline(0, color="black", linewidth=0.8)
    ax.set_xlabel("Pearson's rho")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_training_history(history: Sequence[Mapping[str, float]], path,
                          title: str = "Training loss") -> Path:
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(epochs, [h["ce"] for h in history], label="ce")
    ax.plot(epochs, [h["gkr"] for h in history], label="gkr")
    ax.plot(epochs, [h["total"] for h in history], label="total")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
