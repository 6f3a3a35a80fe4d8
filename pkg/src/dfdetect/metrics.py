"""Accuracy, confusion, ROC/AUC, precision-recall/average precision.

The positive class is ``fake``.  Curves are built by sweeping the distinct
scores in descending order, so tied predictions always enter together.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import LABELS, atomic_write


@dataclass(frozen=True)
class ScoredPrediction:
    id: str
    score: float
    label: str

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score!r} for {self.id} outside [0, 1]")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")


@dataclass
class EvalReport:
    accuracy: float
    threshold: float
    confusion: dict
    n_real: int
    n_fake: int
    roc: list = field(default_factory=list)
    roc_auc: float | None = None
    pr: list = field(default_factory=list)
    average_precision: float | None = None
    recall_at_precision_1: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        # json has no infinity; the first ROC/PR threshold is +inf by construction
        d["roc"] = [[a, b, _finite(t)] for a, b, t in self.roc]
        d["pr"] = [[a, b, _finite(t)] for a, b, t in self.pr]
        return d


def _finite(t):
    return None if math.isinf(t) else t


def _arrays(preds):
    if not preds:
        raise ValueError("no predictions to evaluate")
    scores = np.array([p.score for p in preds], dtype=float)
    if np.any(~np.isfinite(scores)) or np.any(scores < 0) or np.any(scores > 1):
        raise ValueError("scores must lie in [0, 1]")
    y = np.array([p.label == "fake" for p in preds], dtype=bool)
    return scores, y


def _grouped_counts(scores, y):
    """Cumulative (TP, FP) after admitting each distinct score, highest first."""
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(t)[last_of_group]
    fp = np.cumsum(~t)[last_of_group]
    return s[last_of_group], tp, fp


def roc_curve(scores, y):
    thr, tp, fp = _grouped_counts(scores, y)
    P, N = int(y.sum()), int((~y).sum())
    fpr = np.r_[0.0, fp / N]
    tpr = np.r_[0.0, tp / P]
    return fpr, tpr, np.r_[np.inf, thr]


def pr_curve(scores, y):
    thr, tp, fp = _grouped_counts(scores, y)
    P = int(y.sum())
    recall = tp / P
    precision = tp / (tp + fp)
    return recall, precision, thr


def trapezoid(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def average_precision_from_curve(recall, precision) -> float:
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def evaluate(preds, threshold: float = 0.5) -> EvalReport:
    scores, y = _arrays(preds)
    hard = scores >= threshold
    tp = int(np.sum(hard & y))
    fp = int(np.sum(hard & ~y))
    tn = int(np.sum(~hard & ~y))
    fn = int(np.sum(~hard & y))
    n_fake, n_real = int(y.sum()), int((~y).sum())
    report = EvalReport(
        accuracy=(tp + tn) / len(scores),
        threshold=threshold,
        confusion={"TP": tp, "FP": fp, "TN": tn, "FN": fn},
        n_real=n_real,
        n_fake=n_fake,
    )
    if n_fake and n_real:
        fpr, tpr, rthr = roc_curve(scores, y)
        report.roc = [(float(a), float(b), float(t)) for a, b, t in zip(fpr, tpr, rthr)]
        report.roc_auc = trapezoid(fpr, tpr)
        recall, precision, pthr = pr_curve(scores, y)
        report.pr = [(float(r), float(p), float(t)) for r, p, t in zip(recall, precision, pthr)]
        report.average_precision = average_precision_from_curve(recall, precision)
        perfect = recall[precision == 1.0]
        report.recall_at_precision_1 = float(perfect.max()) if perfect.size else 0.0
    return report


def auc_oracle(preds) -> float:
    """Pairwise-concordance AUC; ties earn half credit.  O(n_fake * n_real)."""
    fakes = [p.score for p in preds if p.label == "fake"]
    reals = [p.score for p in preds if p.label == "real"]
    if not fakes or not reals:
        raise ValueError("auc_oracle needs both classes")
    total = 0.0
    for f in fakes:
        for r in reals:
            total += 1.0 if f > r else 0.5 if f == r else 0.0
    return total / (len(fakes) * len(reals))


_METRICS = {
    "accuracy": lambda s, y, t: float(np.mean((s >= t) == y)),
    "roc_auc": lambda s, y, t: trapezoid(*roc_curve(s, y)[:2]),
    "average_precision": lambda s, y, t: average_precision_from_curve(*pr_curve(s, y)[:2]),
}


def bootstrap_ci(preds, metric: str = "accuracy", n_resamples: int = 1000, seed: int = 0,
                 threshold: float = 0.5, level: float = 0.95, max_attempts: int | None = None):
    """Percentile bootstrap interval for ``metric``.

    Resamples that lose a class are redrawn for the ranking metrics; after
    ``max_attempts`` draws in total the interval is built from what was kept.
    """
    if metric not in _METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(_METRICS)}")
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    scores, y = _arrays(preds)
    needs_both = metric != "accuracy"
    if needs_both and (y.all() or not y.any()):
        raise ValueError(f"{metric} needs both classes")
    fn = _METRICS[metric]
    rng = np.random.default_rng(seed)
    n = len(scores)
    cap = max_attempts or 20 * n_resamples
    values, attempts = [], 0
    while len(values) < n_resamples and attempts < cap:
        attempts += 1
        idx = rng.integers(0, n, size=n)
        ys = y[idx]
        if needs_both and (ys.all() or not ys.any()):
            continue
        values.append(fn(scores[idx], ys, threshold))
    if not values:
        raise RuntimeError("no valid bootstrap resamples")
    alpha = (1 - level) / 2
    low, high = np.quantile(values, [alpha, 1 - alpha])
    return float(low), float(high)


# -- files -------------------------------------------------------------------------

def write_predictions(preds, path) -> None:
    with atomic_write(Path(path)) as fh:
        w = csv.writer(fh)
        w.writerow(["id", "score", "label"])
        for p in preds:
            w.writerow([p.id, repr(float(p.score)), p.label])


def read_predictions(path) -> list[ScoredPrediction]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [ScoredPrediction(r["id"], float(r["score"]), r["label"]) for r in csv.DictReader(fh)]


def write_report(report: EvalReport, out_dir) -> None:
    """``eval.json`` plus ``roc.csv`` / ``pr.csv`` point lists."""
    out_dir = Path(out_dir)
    with atomic_write(out_dir / "eval.json") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    with atomic_write(out_dir / "roc.csv") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        w.writerows(report.roc)
    with atomic_write(out_dir / "pr.csv") as fh:
        w = csv.writer(fh)
        w.writerow(["recall", "precision", "threshold"])
        w.writerows(report.pr)
