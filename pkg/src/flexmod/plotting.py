"""Figures written next to the CSV outputs of a run."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.dpi": 120,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-stable
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_accuracy(records, path, target: float | None = None, title: str = "Validation accuracy"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        rounds = [r.round for r in records]
        ax.plot(rounds, [r.acc for r in records], marker="o", ms=3, lw=1.2)
        if target is not None:
            ax.axhline(target, color="0.5", ls="--", lw=0.8, label=f"target {target:g}")
            ax.legend(loc="lower right")
        ax.set_xlabel("round")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax.set_title(title)
        return _save(fig, path)


def plot_allocation(records, labels: Sequence[str], path):
    """Stacked bars of slots per combination, one bar per round."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        rounds = np.array([r.round for r in records])
        alloc = np.array([r.allocation for r in records]).reshape(len(records), len(labels))
        bottom = np.zeros(len(records))
        for i, label in enumerate(labels):
            ax.bar(rounds, alloc[:, i], bottom=bottom, label=label, width=0.8)
            bottom += alloc[:, i]
        ax.set_xlabel("round")
        ax.set_ylabel("slots")
        ax.set_title("Allocation per round")
        if len(labels):
            ax.legend(loc="upper right", ncol=min(3, len(labels)))
        return _save(fig, path)


def plot_compare(rows: Sequence[dict], path, target: float | None = None):
    """Mean accuracy per round for each strategy, shaded by min/max over seeds."""
    curves: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        curves[row["strategy"]][int(row["round"])].append(float(row["acc"]))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for name, by_round in curves.items():
            rounds = sorted(by_round)
            vals = [by_round[r] for r in rounds]
            ax.plot(rounds, [np.mean(v) for v in vals], lw=1.3, label=name)
            ax.fill_between(rounds, [min(v) for v in vals], [max(v) for v in vals], alpha=0.15)
        if target is not None:
            ax.axhline(target, color="0.5", ls="--", lw=0.8)
        ax.set_xlabel("round")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax.legend(loc="lower right")
        ax.set_title("Strategy comparison")
        return _save(fig, path)
