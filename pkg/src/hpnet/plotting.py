"""Figures written next to the machine-readable reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_confusion(report, path) -> Path:
    cm = report.confusion
    K = cm.shape[0]
    fig, ax = plt.subplots(figsize=(1.2 + 0.7 * K, 1.0 + 0.6 * K))
    rows = cm.sum(axis=1, keepdims=True)
    frac = np.divide(cm, rows, out=np.zeros(cm.shape, dtype=float), where=rows > 0)
    im = ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    for i in range(K):
        for j in range(K):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if frac[i, j] > 0.5 else "black", fontsize=8)
    ax.set_xticks(range(K), report.class_names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(K), report.class_names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"acc {report.acc:.4f}  macro F1 {report.macro_f1:.4f}", fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, path)


def plot_history(history, path) -> Path:
    """Training loss plus validation loss / accuracy per epoch."""
    ep = [h["epoch"] for h in history]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.4))
    a1.plot(ep, [h["train_loss"] for h in history], marker="o", label="train")
    if history and history[0].get("val_loss") is not None:
        a1.plot(ep, [h["val_loss"] for h in history], marker="s", label="val")
        a2.plot(ep, [h["val_acc"] for h in history], marker="o", label="val acc")
        a2.plot(ep, [h["val_macro_f1"] for h in history], marker="s", label="val macro F1")
        a2.legend()
    a1.set_yscale("log")
    a1.set_xlabel("epoch")
    a1.set_ylabel("cross-entropy")
    a1.legend()
    a2.set_xlabel("epoch")
    a2.set_ylim(0, 1.02)
    return _save(fig, path)


def plot_bench(report, path) -> Path:
    lv = [r.level for r in report.rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.4))
    a1.plot(lv, [r.time_per_packet * 1e3 for r in report.rows], marker="o")
    a1.set_xscale("log")
    a1.set_yscale("log")
    a1.set_xlabel("packets per batch")
    a1.set_ylabel("ms per packet")
    a2.plot(lv, [r.peak_memory / 2 ** 20 for r in report.rows], marker="o", color="C1")
    a2.set_xscale("log")
    a2.set_yscale("log")
    a2.set_xlabel("packets per batch")
    a2.set_ylabel("peak activation memory (MB)")
    return _save(fig, path)


def plot_ablation(f1_by_variant: dict, path) -> Path:
    names = list(f1_by_variant)
    fig, ax = plt.subplots(figsize=(1.5 + 1.1 * len(names), 3.2))
    ax.bar(names, [f1_by_variant[n] for n in names], color="C0")
    ax.set_ylabel("test macro F1")
    ax.set_ylim(0, 1.02)
    return _save(fig, path)
