"""Binary classification metrics and the seed-level significance test."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats
from scipy.stats import rankdata

VAR_FLOOR = 1e-12


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ClassPRF:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    macro_f1: float
    auc: float
    real: ClassPRF
    fake: ClassPRF

    def to_dict(self) -> dict:
        return asdict(self)

    def flat(self) -> dict:
        """Columns in the usual benchmark-table order."""
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "auc": self.auc,
            "fake_precision": self.fake.precision,
            "fake_recall": self.fake.recall,
            "fake_f1": self.fake.f1,
            "real_precision": self.real.precision,
            "real_recall": self.real.recall,
            "real_f1": self.real.f1,
        }


TABLE_COLUMNS = list(EvalReport(0, 0, 0, ClassPRF(0, 0, 0), ClassPRF(0, 0, 0)).flat())


def _binary(x, name: str) -> np.ndarray:
    arr = np.asarray(x).reshape(-1)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return arr.astype(int)


def _prf(tp: int, fp: int, fn: int) -> ClassPRF:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return ClassPRF(p, r, f)


def confusion_and_prf(labels, predictions):
    """Return ``(accuracy, {0: ClassPRF, 1: ClassPRF}, confusion)``.

    ``confusion[i, j]`` counts samples with label ``i`` predicted as ``j``.
    """
    y, p = _binary(labels, "labels"), _binary(predictions, "predictions")
    if y.shape != p.shape:
        raise ValueError("labels and predictions differ in length")
    if y.size == 0:
        raise ValueError("empty input")
    cm = np.zeros((2, 2), dtype=int)
    np.add.at(cm, (y, p), 1)
    per_class = {}
    for c in (0, 1):
        o = 1 - c
        per_class[c] = _prf(cm[c, c], cm[o, c], cm[c, o])
    acc = (cm[0, 0] + cm[1, 1]) / y.size
    return float(acc), per_class, cm


def macro_f1(labels, predictions) -> float:
    _, prf, _ = confusion_and_prf(labels, predictions)
    return (prf[0].f1 + prf[1].f1) / 2


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=float).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("labels and scores differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def evaluate(labels, fake_probs, threshold: float = 0.5) -> EvalReport:
    """Full report from fake-class probabilities."""
    fake_probs = np.asarray(fake_probs, dtype=float).reshape(-1)
    preds = (fake_probs >= threshold).astype(int)
    acc, prf, _ = confusion_and_prf(labels, preds)
    try:
        auc = roc_auc(labels, fake_probs)
    except UndefinedMetricError:
        auc = float("nan")
    return EvalReport(acc, (prf[0].f1 + prf[1].f1) / 2, auc, prf[0], prf[1])


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation; a single value has std 0."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def significance(group_a, group_b) -> float:
    """Two-sided Welch t-test p-value; variances are floored to stay defined."""
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least 2 values")
    va = max(a.var(ddof=1), VAR_FLOOR) / a.size
    vb = max(b.var(ddof=1), VAR_FLOOR) / b.size
    diff = a.mean() - b.mean()
    if diff == 0:
        return 1.0
    t = diff / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(2 * stats.t.sf(abs(t), df))
