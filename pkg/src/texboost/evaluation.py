"""Test-set classification metrics with malignant as the positive class."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .tables import csv_text, format_real


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None
    tp: int
    fp: int
    fn: int
    tn: int
    threshold: float = 0.5
    # metrics whose denominator was zero (reported as 0) or that are undefined
    undefined: tuple[str, ...] = field(default=())

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["undefined"] = list(self.undefined)
        doc["confusion"] = {k: doc.pop(k) for k in ("tp", "fp", "fn", "tn")}
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        """One-row CSV in the column order precision, recall, f1, auc, accuracy."""
        auc = "" if self.auc is None else format_real(self.auc)
        return csv_text(["precision", "recall", "f1", "auc", "accuracy"],
                        [[format_real(self.precision), format_real(self.recall),
                          format_real(self.f1), auc, format_real(self.accuracy)]])


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve by midrank (Mann-Whitney) pair counting.

    Equals the fraction of positive/negative pairs ordered correctly, with
    tied pairs scoring one half.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative case")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # doubled midranks stay integral: ties in [i, j) share rank (i + j + 1) / 2
    ranks2 = np.empty(s.shape[0], dtype=np.int64)
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.shape[0]]
    for a, b in zip(starts, ends):
        ranks2[order[a:b]] = a + b + 1
    u2 = int(ranks2[y].sum()) - n_pos * (n_pos + 1)
    return (u2 / 2) / (n_pos * n_neg)


def evaluate(probabilities, labels, threshold: float = 0.5) -> EvalReport:
    """Thresholded confusion metrics plus AUC.

    A case is predicted malignant when its probability is ``>= threshold``.
    Zero denominators yield 0 and are listed in ``undefined``; with a single
    class present ``auc`` is None.
    """
    p, y = _check(probabilities, labels)
    if p.shape[0] == 0:
        raise ValueError("no cases to evaluate")
    pred = p >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    undefined = []
    precision = tp / (tp + fp) if tp + fp else 0.0
    if not tp + fp:
        undefined.append("precision")
    recall = tp / (tp + fn) if tp + fn else 0.0
    if not tp + fn:
        undefined.append("recall")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        undefined.append("f1")
    try:
        auc = roc_auc(p, y)
    except ValueError:
        auc = None
        undefined.append("auc")
    accuracy = (tp + tn) / p.shape[0]
    return EvalReport(accuracy, precision, recall, f1, auc, tp, fp, fn, tn, threshold, tuple(undefined))
