"""Pixel confusion matrix and accuracy/precision/recall/F1 reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are prediction."""

    def __init__(self, num_classes):
        self.k = num_classes
        self.mat = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, truth, pred, ignore_label=None):
        truth = np.asarray(truth).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if truth.shape != pred.shape:
            raise ValueError("truth/pred size mismatch")
        if ignore_label is not None:
            keep = truth != ignore_label
            truth, pred = truth[keep], pred[keep]
        if truth.size and (truth.min() < 0 or truth.max() >= self.k
                           or pred.min() < 0 or pred.max() >= self.k):
            raise ValueError("class index out of range")
        self.mat += np.bincount(
            self.k * truth.astype(np.int64) + pred,
            minlength=self.k * self.k).reshape(self.k, self.k)

    def merge(self, other):
        self.mat += other.mat

    @property
    def total(self):
        return int(self.mat.sum())


@dataclass
class MetricsReport:
    accuracy: float
    precision: list
    recall: list
    f1: list
    macro_precision: float
    macro_recall: float
    macro_f1: float


def _safe_div(a, b):
    return float(a) / float(b) if b else 0.0


def compute_report(cm):
    mat = cm.mat
    total = mat.sum()
    acc = _safe_div(np.trace(mat), total)
    prec, rec, f1 = [], [], []
    for c in range(cm.k):
        p = _safe_div(mat[c, c], mat[:, c].sum())
        r = _safe_div(mat[c, c], mat[c, :].sum())
        prec.append(p)
        rec.append(r)
        f1.append(_safe_div(2 * p * r, p + r) if p + r else 0.0)
    return MetricsReport(
        accuracy=acc, precision=prec, recall=rec, f1=f1,
        macro_precision=float(np.mean(prec)),
        macro_recall=float(np.mean(rec)),
        macro_f1=float(np.mean(f1)),
    )


def format_table(rows):
    """Aligned A/P/R/F1 table, values x100 with one decimal.

    rows: list of (label, MetricsReport).
    """
    width = max((len(label) for label, _ in rows), default=6)
    width = max(width, 6)
    lines = [f"{'method':<{width}}  {'A':>6} {'P':>6} {'R':>6} {'F1':>6}"]
    for label, rep in rows:
        lines.append(
            f"{label:<{width}}  "
            f"{100 * rep.accuracy:6.1f} {100 * rep.macro_precision:6.1f} "
            f"{100 * rep.macro_recall:6.1f} {100 * rep.macro_f1:6.1f}")
    return "\n".join(lines)


def report_csv(rows):
    lines = ["method,accuracy,precision,recall,f1"]
    for label, rep in rows:
        lines.append(f"{label},{rep.accuracy:.6f},{rep.macro_precision:.6f},"
                     f"{rep.macro_recall:.6f},{rep.macro_f1:.6f}")
    return "\n".join(lines) + "\n"
