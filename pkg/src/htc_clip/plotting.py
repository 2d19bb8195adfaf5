"""Figures written next to the delimited reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import MetricsReport  # noqa: E402

COMPONENT_LABELS = {
    "L_C_L": "linear",
    "L_C_H": "hierarchy",
    "hat_L_C_L": "linear (positive)",
    "hat_L_C_H": "hierarchy (positive)",
    "L_con": "contrastive",
}

STYLE = {
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_history(history: list[dict], path: str | Path) -> Path:
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_f1) = plt.subplots(1, 2, figsize=(8, 3))
        ax_loss.plot(epochs, [r["train_loss"] for r in history], color="black", lw=1.5, label="total")
        for key, label in COMPONENT_LABELS.items():
            ax_loss.plot(epochs, [r[key] for r in history], lw=1, label=label)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("training loss")
        ax_loss.legend(frameon=False)

        ax_f1.plot(epochs, [r["val_micro_f1"] for r in history], marker="o", ms=3, label="micro F1")
        ax_f1.plot(epochs, [r["val_macro_f1"] for r in history], marker="s", ms=3, label="macro F1")
        best = [r["epoch"] for r in history if r["best_flag"]]
        if best:
            ax_f1.axvline(best[-1], color="grey", ls=":", lw=1)
        ax_f1.set_ylim(0, 1.02)
        ax_f1.set_xlabel("epoch")
        ax_f1.set_ylabel("validation")
        ax_f1.legend(frameon=False, loc="lower right")
        fig.tight_layout()
    return _save(fig, path)


def plot_report(report: MetricsReport, path: str | Path) -> Path:
    n = len(report.labels)
    with plt.rc_context(STYLE):
        fig, (ax_lvl, ax_lab) = plt.subplots(
            1, 2, figsize=(max(6, 2 + 0.25 * n), 3), gridspec_kw={"width_ratios": [1, 4]})
        levels = range(1, len(report.level_macro_f1) + 1)
        ax_lvl.bar(list(levels), report.level_macro_f1, color="tab:blue")
        ax_lvl.set_xticks(list(levels))
        ax_lvl.set_xlabel("level")
        ax_lvl.set_ylabel("macro F1")
        ax_lvl.set_ylim(0, 1.02)

        ax_lab.bar(range(n), report.f1, color="tab:orange")
        ax_lab.set_xticks(range(n))
        ax_lab.set_xticklabels(report.labels, rotation=90)
        ax_lab.set_ylabel("F1")
        ax_lab.set_ylim(0, 1.02)
        ax_lab.set_title(f"micro {report.micro_f1:.3f}  macro {report.macro_f1:.3f}")
        fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows: list[dict], path: str | Path) -> Path:
    tables = list(dict.fromkeys(r["table"] for r in rows))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(tables), figsize=(4 * len(tables), 3.5), squeeze=False)
        for ax, table in zip(axes[0], tables):
            sub = [r for r in rows if r["table"] == table]
            x = range(len(sub))
            ax.bar([i - 0.2 for i in x], [r["micro_f1"] for r in sub], width=0.4, label="micro F1")
            ax.bar([i + 0.2 for i in x], [r["macro_f1"] for r in sub], width=0.4, label="macro F1")
            ax.set_xticks(list(x))
            ax.set_xticklabels([r["variant"] for r in sub], rotation=60, ha="right")
            ax.set_ylim(0, 1.02)
            ax.set_title(table)
        axes[0][0].legend(frameon=False, loc="lower left")
        fig.tight_layout()
    return _save(fig, path)
