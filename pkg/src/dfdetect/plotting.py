"""Figures for run and sweep reports, rendered straight to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .model import ARCHS, INITS  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{path.suffix}")
    fig.savefig(tmp, bbox_inches="tight")
    plt.close(fig)
    tmp.replace(path)
    return path


def learning_curves(curves: dict, path, title: str = "Learning curves") -> Path:
    """One panel per run: train/val loss on the left axis, val accuracy on the right."""
    n = max(1, len(curves))
    cols = min(n, 3)
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(4.2 * cols, 3.0 * rows), squeeze=False)
    for ax, (label, curve) in zip(axes.flat, curves.items()):
        ep = [r.epoch for r in curve]
        ax.plot(ep, [r.train_loss for r in curve], label="train loss", color="tab:blue")
        ax.plot(ep, [r.val_loss for r in curve], label="val loss", color="tab:orange")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        ax.set_title(label, fontsize=8)
        acc_ax = ax.twinx()
        acc_ax.plot(ep, [r.val_accuracy for r in curve], ls="--", color="tab:green", label="val acc")
        acc_ax.set_ylim(0, 1)
        acc_ax.grid(False)
        handles = ax.get_legend_handles_labels()[0] + acc_ax.get_legend_handles_labels()[0]
        ax.legend(handles=handles, fontsize=7, loc="upper right")
    for ax in list(axes.flat)[len(curves):]:
        ax.set_visible(False)
    fig.suptitle(title)
    return _save(fig, path)


def roc_pr(reports: dict, path) -> Path:
    """ROC (left) and precision-recall (right) for each labelled ``eval.json`` dict."""
    fig, (ax_roc, ax_pr) = plt.subplots(1, 2, figsize=(8.5, 3.8))
    for label, rep in reports.items():
        roc = np.array([(p[0], p[1]) for p in rep["roc"]]) if rep.get("roc") else None
        pr = np.array([(p[0], p[1]) for p in rep["pr"]]) if rep.get("pr") else None
        if roc is not None:
            ax_roc.plot(roc[:, 0], roc[:, 1], label=f"{label} (AUC {rep['roc_auc']:.2f})")
        if pr is not None:
            ax_pr.step(np.r_[0, pr[:, 0]], np.r_[pr[0, 1], pr[:, 1]], where="post",
                       label=f"{label} (AP {rep['average_precision']:.2f})")
    ax_roc.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls=":")
    ax_roc.set_xlabel("false positive rate")
    ax_roc.set_ylabel("detection rate")
    ax_pr.set_xlabel("recall")
    ax_pr.set_ylabel("precision")
    for ax in (ax_roc, ax_pr):
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7, loc="lower right" if ax is ax_roc else "lower left")
    return _save(fig, path)


def accuracy_grid(results, path) -> Path:
    """Heat map of best validation accuracy, rows scheduler x lr, columns arch x init."""
    archs = [a for a in ARCHS if any(r.arch == a for r in results)]
    inits = [i for i in INITS if any(r.init == i for r in results)]
    rows = sorted({(r.scheduler, r.lr) for r in results}, key=lambda k: (k[0], -k[1]))
    cols = [(a, i) for a in archs for i in inits]
    lookup = {r.key: r.best_val_accuracy for r in results if r.status == "done"}
    grid = np.full((len(rows), len(cols)), np.nan)
    for i, (s, lr) in enumerate(rows):
        for j, (a, init) in enumerate(cols):
            v = lookup.get((a, init, s, lr))
            if v is not None:
                grid[i, j] = v
    fig, ax = plt.subplots(figsize=(1.0 * len(cols) + 2, 0.5 * len(rows) + 1.5))
    im = ax.imshow(grid, cmap="Blues", vmin=np.nanmin(grid) if np.isfinite(grid).any() else 0, vmax=1)
    ax.set_xticks(range(len(cols)), [f"{a}\n{i}" for a, i in cols], fontsize=7)
    ax.set_yticks(range(len(rows)), [f"{s} {lr:g}" for s, lr in rows], fontsize=7)
    ax.grid(False)
    for i in range(len(rows)):
        for j in range(len(cols)):
            text = "—" if np.isnan(grid[i, j]) else f"{grid[i, j]:.3f}"
            ax.text(j, i, text, ha="center", va="center", fontsize=7,
                    color="white" if np.isfinite(grid[i, j]) and grid[i, j] > 0.8 else "black")
    fig.colorbar(im, ax=ax, fraction=0.03)
    ax.set_title("Best validation accuracy")
    return _save(fig, path)
