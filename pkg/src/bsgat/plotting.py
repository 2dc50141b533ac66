"""Report figures written to files (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .eval_metrics import lorenz_curve  # noqa: E402

# no Software/date chunks, so repeated runs give identical bytes
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)


def plot_lorenz(curves: dict[str, np.ndarray], path, title: str = "Neighbour-count Lorenz curve"):
    """One Lorenz polyline per named degree vector, plus the equality line."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], color="0.6", linestyle="--", label="equality")
    for name, degrees in curves.items():
        x, y = lorenz_curve(degrees)
        ax.plot(x, y, label=name)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("cumulative share of nodes (ascending degree)")
    ax.set_ylabel("cumulative share of neighbours")
    ax.set_title(title)
    ax.legend(frameon=False, loc="upper left")
    fig.tight_layout()
    _save(fig, path)


def plot_confusion(cm, classes, path, title: str = "Confusion matrix"):
    cm = np.asarray(cm)
    fig, ax = plt.subplots(figsize=(1.2 * len(classes) + 2.5, 1.1 * len(classes) + 2))
    row = cm.sum(axis=1, keepdims=True)
    share = np.divide(cm, row, out=np.zeros(cm.shape), where=row > 0)
    im = ax.imshow(share, cmap="Blues", vmin=0, vmax=1)
    for (i, j), v in np.ndenumerate(cm):
        ax.text(j, i, str(v), ha="center", va="center",
                color="white" if share[i, j] > 0.5 else "black", fontsize=8)
    ax.set_xticks(range(len(classes)), classes, rotation=45, ha="right")
    ax.set_yticks(range(len(classes)), classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="row share")
    fig.tight_layout()
    _save(fig, path)


def plot_training(history: list[dict], path):
    if not history:
        return
    epochs = [r["epoch"] for r in history]
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    ax1.plot(epochs, [r["train_loss"] for r in history], color="tab:red")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [r["val_weighted_f1"] for r in history], color="tab:blue")
    ax2.set_ylabel("validation weighted F1", color="tab:blue")
    ax2.set_ylim(0, 1.02)
    fig.tight_layout()
    _save(fig, path)
