"""Figure rendering for the report path: confusion heatmaps, training
curves, and UAR-versus-SNR lines, written as PNG files.

Files are byte-reproducible: the Agg backend is forced and the PNG
``Software`` metadata (which would embed the matplotlib version) is
suppressed.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .corpus import EMOTIONS  # noqa: E402

_SAVE_KWARGS = {"dpi": 120, "metadata": {"Software": None},
                "bbox_inches": "tight"}


def save_confusion_figure(report, path: str | Path) -> Path:
    """Heatmap of a confusion matrix, annotated with counts.

    Accepts a single-run report or a multi-run summary (whose confusion is
    the sum over runs).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cm = np.asarray(report.confusion, dtype=float)
    names = EMOTIONS[:cm.shape[0]]
    uar = getattr(report, "uar", None)
    if uar is None:
        uar = report.mean_uar
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"{report.fold_id} / {report.condition} "
                 f"(UAR {uar * 100:.1f}%)", fontsize=10)
    thresh = cm.max() / 2 if cm.max() else 0.5
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, f"{int(cm[i, j])}", ha="center", va="center",
                    color="white" if cm[i, j] > thresh else "black",
                    fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path


def save_history_figure(history, path: str | Path) -> Path:
    """Training loss and validation accuracy per epoch on twin axes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [row["epoch"] for row in history]
    loss = [row["train_loss"] for row in history]
    val_acc = [row["val_acc"] * 100 for row in history]
    halved = [row["epoch"] for row in history if row.get("halved")]

    fig, ax1 = plt.subplots(figsize=(5.4, 3.4))
    ax1.plot(epochs, loss, color="tab:red", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:red")
    ax1.tick_params(axis="y", labelcolor="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(epochs, val_acc, color="tab:blue", label="val accuracy")
    ax2.set_ylabel("val accuracy [%]", color="tab:blue")
    ax2.tick_params(axis="y", labelcolor="tab:blue")
    for e in halved:
        ax1.axvline(e, color="gray", linestyle=":", linewidth=0.8)
    ax1.set_title("training curve", fontsize=10)
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path


def save_snr_figure(curves: dict[str, tuple[list, list]],
                    path: str | Path, title: str = "UAR vs SNR") -> Path:
    """UAR against SNR for one or more systems.

    ``curves`` maps a legend label to (snr_values_db, uar_values); an inf
    SNR point (the clean condition) is drawn at the right edge.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for label in sorted(curves):
        snrs, uars = curves[label]
        xs = []
        finite = [s for s in snrs if np.isfinite(s)]
        clean_x = (max(finite) + 5) if finite else 0
        for s in snrs:
            xs.append(s if np.isfinite(s) else clean_x)
        ax.plot(xs, [u * 100 for u in uars], marker="o", label=label)
        if len(finite) != len(snrs):
            ax.axvline(clean_x, color="gray", linewidth=0.6, linestyle=":")
    ax.set_xlabel("SNR [dB] (rightmost point: clean)")
    ax.set_ylabel("UAR [%]")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path
