"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METHOD_LABELS = {"none": "None", "at": "+AT", "trades": "+Trades", "dart": "+DART", "dart_gt": "+DART (gt labels)"}
COLORS = {"clean": "#4C72B0", "adv": "#DD8452"}

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps PNG bytes reproducible
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def pilot_bars(summary: list[dict], attack: str, path) -> Path:
    """Grouped clean/adversarial accuracy bars, one panel per task.

    ``summary`` rows need ``task, method, attack, clean_mean, clean_sd,
    adv_mean, adv_sd`` with accuracies in [0, 1].
    """
    rows = [r for r in summary if r["attack"] == attack]
    tasks = sorted({r["task"] for r in rows})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(tasks), figsize=(3.4 * len(tasks), 2.8), squeeze=False, sharey=True)
        for ax, task in zip(axes[0], tasks):
            sub = [r for r in rows if r["task"] == task]
            order = [m for m in METHOD_LABELS if any(r["method"] == m for r in sub)]
            sub = sorted(sub, key=lambda r: order.index(r["method"]))
            x = np.arange(len(sub))
            w = 0.38
            ax.bar(x - w / 2, [100 * r["clean_mean"] for r in sub], w, yerr=[100 * r["clean_sd"] for r in sub],
                   color=COLORS["clean"], label="clean", capsize=2)
            ax.bar(x + w / 2, [100 * r["adv_mean"] for r in sub], w, yerr=[100 * r["adv_sd"] for r in sub],
                   color=COLORS["adv"], label=f"adversarial ({attack})", capsize=2)
            ax.set_xticks(x)
            ax.set_xticklabels([METHOD_LABELS[r["method"]] for r in sub], rotation=20)
            ax.set_title(task)
            ax.set_ylim(0, 100)
        axes[0][0].set_ylabel("target accuracy (%)")
        axes[0][-1].legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def bound_terms(summary: list[dict], attack: str, path) -> Path:
    """Stacked attack-defense / benign-maintenance / ideal-classifier terms against the risk."""
    rows = [r for r in summary if r["attack"] == attack]
    tasks = sorted({r["task"] for r in rows})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(tasks), figsize=(3.4 * len(tasks), 2.8), squeeze=False, sharey=True)
        for ax, task in zip(axes[0], tasks):
            sub = [r for r in rows if r["task"] == task]
            order = [m for m in METHOD_LABELS if any(r["method"] == m for r in sub)]
            sub = sorted(sub, key=lambda r: order.index(r["method"]))
            x = np.arange(len(sub))
            bottom = np.zeros(len(sub))
            for key, color in (("attack_defense", "#C44E52"), ("benign_maintenance", "#55A868"), ("ideal_classifier", "#8172B2")):
                vals = np.array([r[key] for r in sub])
                ax.bar(x, vals, 0.6, bottom=bottom, color=color, label=key.replace("_", " "))
                bottom += vals
            ax.plot(x, [r["lhs"] for r in sub], "k_", markersize=18, mew=2, label="adv + clean risk")
            ax.set_xticks(x)
            ax.set_xticklabels([METHOD_LABELS[r["method"]] for r in sub], rotation=20)
            ax.set_title(task)
        axes[0][0].set_ylabel("empirical 0-1 rate")
        axes[0][-1].legend(loc="upper right", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def training_curves(rows: list[dict], keys, path, title="") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        epochs = [r["epoch"] for r in rows]
        for key in keys:
            ax.plot(epochs, [r[key] for r in rows], label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
