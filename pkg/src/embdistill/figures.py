"""Matplotlib renderings of run artifacts (written next to the CSV outputs)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def training_curves(rows: list[dict], path: str):
    """Two panels: per-epoch losses and dev token error rates."""
    epochs = [r["epoch"] for r in rows]
    fig, (ax_loss, ax_ter) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax_loss.plot(epochs, [r["main_loss"] for r in rows], label="main", marker=".")
    if any(r["aux_loss"] != 0.0 for r in rows):
        ax_loss.plot(epochs, [r["aux_loss"] for r in rows], label="aux", marker=".")
        ax_loss.plot(epochs, [r["combined_loss"] for r in rows], label="combined", marker=".")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_loss.legend(fontsize=8)
    ax_ter.plot(epochs, [100 * r["dev_ter"] for r in rows], label="dev TER", marker=".")
    ax_ter.plot(epochs, [100 * r["ema_dev_ter"] for r in rows], label="dev TER (EMA)", marker=".")
    best = min(range(len(rows)), key=lambda i: rows[i]["ema_dev_ter"])
    ax_ter.axvline(rows[best]["epoch"], color="gray", lw=0.8, ls="--")
    ax_ter.set_xlabel("epoch")
    ax_ter.set_ylabel("TER [%]")
    ax_ter.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sweep_curve(rows: list[dict], path: str):
    """Dev/test TER against the auxiliary-loss weight (0 plotted on a linear notch)."""
    done = [r for r in rows if r.get("status", "ok") == "ok"]
    if not done:
        return
    done = sorted(done, key=lambda r: r["sigma"])
    xs = np.arange(len(done))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(xs, [100 * r["dev_ter"] for r in done], marker="o", label="dev TER")
    ax.plot(xs, [100 * r["test_ter"] for r in done], marker="s", label="test TER")
    best = min(range(len(done)), key=lambda i: done[i]["dev_ter"])
    ax.scatter([xs[best]], [100 * done[best]["dev_ter"]], s=90, facecolors="none",
               edgecolors="tab:red", label="best dev")
    ax.set_xticks(xs)
    ax.set_xticklabels([f"{r['sigma']:g}" for r in done])
    ax.set_xlabel("auxiliary weight")
    ax.set_ylabel("TER [%]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def lattice_heatmaps(dump: dict, path: str):
    """Node occupancy and the normalized frame-consumption posterior."""
    gamma = np.array(dump["gamma"])
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    im0 = axes[0].imshow(gamma.T, aspect="auto", origin="lower", cmap="viridis")
    axes[0].set_xlabel("frame t")
    axes[0].set_ylabel("emitted prefix length u")
    axes[0].set_title("node occupancy")
    fig.colorbar(im0, ax=axes[0])
    q = np.array(dump["q_normalized"])
    if q.size:
        im1 = axes[1].imshow(q, aspect="auto", origin="lower", cmap="magma")
        axes[1].set_xlabel("frame t")
        axes[1].set_ylabel("token index i")
        axes[1].set_title("normalized posterior")
        fig.colorbar(im1, ax=axes[1])
    else:
        axes[1].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
