"""Test-set metrics and multi-run aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import model as mil
from .errors import ConfigError

__all__ = ["EvalResult", "roc_auc", "confusion_matrix", "f1_score", "score_predictions",
           "evaluate", "aggregate_runs"]


@dataclass
class EvalResult:
    accuracy: float
    f1: float
    auc: float | None
    confusion: np.ndarray
    num_samples: int
    flags: list = field(default_factory=list)

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "auc": self.auc,
            "num_samples": self.num_samples,
            "confusion": self.confusion.tolist(),
            "flags": list(self.flags),
        }


def roc_auc(y_true, scores):
    """Mann-Whitney AUC for binary labels (1 = positive); ties count one half.

    Returns None when only one class is present.
    """
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks: ties split evenly
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_matrix(y_true, y_pred, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def _f1_from_counts(tp, fp, fn):
    """F1 with undefined precision or recall mapped to 0; second value flags that."""
    if tp + fp == 0 or tp + fn == 0:
        return 0.0, True
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if precision + recall == 0:
        return 0.0, False
    return 2 * precision * recall / (precision + recall), False


def f1_score(cm):
    """Binary F1 on class 1 for two classes, macro F1 otherwise."""
    cm = np.asarray(cm)
    K = cm.shape[0]
    classes = [1] if K == 2 else range(K)
    scores, undefined = [], False
    for k in classes:
        tp = cm[k, k]
        fp = cm[:, k].sum() - tp
        fn = cm[k, :].sum() - tp
        f, flag = _f1_from_counts(tp, fp, fn)
        scores.append(f)
        undefined |= flag
    return float(np.mean(scores)), undefined


def score_predictions(y_true, probs) -> EvalResult:
    """Metrics from true labels and predicted class probabilities ``(n, K)``."""
    y = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    n, K = probs.shape
    if n == 0:
        raise ConfigError("cannot evaluate on an empty set")
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(y, pred, K)
    flags = []
    accuracy = float(np.trace(cm) / n)
    f1, undefined = f1_score(cm)
    if undefined:
        flags.append("f1_zero_division")
    if K == 2:
        auc = roc_auc(y == 1, probs[:, 1])
    else:
        per_class = [roc_auc(y == k, probs[:, k]) for k in range(K)]
        defined = [a for a in per_class if a is not None]
        auc = float(np.mean(defined)) if defined else None
        if len(defined) < K and defined:
            flags.append("auc_partial_classes")
    if auc is None:
        flags.append("auc_undefined_single_class")
    return EvalResult(accuracy, f1, auc, cm, n, flags)


def evaluate(params, ds) -> EvalResult:
    if len(ds) == 0:
        raise ConfigError("test set is empty")
    return score_predictions(ds.labels, mil.predict_proba(params, ds))


def aggregate_runs(runs, keys=None):
    """Per-metric mean and sample std (n - 1 denominator) over run summaries.

    ``runs`` is a list of dicts of metric values. ``None`` values are skipped
    and counted. A single observation gets ``std = 0.0`` with
    ``std_defined = False``.
    """
    runs = list(runs)
    if not runs:
        raise ConfigError("aggregate_runs needs at least one run")
    if keys is None:
        keys = [k for k, v in runs[0].items() if isinstance(v, (int, float)) or v is None]
    out = {}
    for key in keys:
        values = [r[key] for r in runs if r.get(key) is not None]
        entry = {"n": len(values), "missing": len(runs) - len(values)}
        if not values:
            entry.update(mean=None, std=None, std_defined=False)
        else:
            mean = math.fsum(values) / len(values)
            if len(values) > 1:
                var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
                entry.update(mean=mean, std=math.sqrt(var), std_defined=True)
            else:
                entry.update(mean=mean, std=0.0, std_defined=False)
        out[key] = entry
    return out
