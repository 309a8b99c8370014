"""Classification metrics: balanced accuracy, AUROC, AUC-PR, Cohen's
kappa, and F1: the confusion-matrix and threshold-curve numbers the
evaluation harness reports.

AUROC is computed by exact positive/negative pair counting (ties worth
half) rather than curve integration; AUC-PR uses the standard step rule
over descending score thresholds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValidationError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValidationError("confusion matrix counts must be non-negative")

    @classmethod
    def from_predictions(cls, y_true: np.ndarray, y_pred: np.ndarray,
                         n_classes: int) -> "ConfusionMatrix":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape:
            raise ValidationError("prediction and label arrays differ in length")
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def true_positives(self) -> np.ndarray:
        return np.diag(self.counts)

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def predicted(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Arithmetic mean of per-class recall."""
    support = cm.support()
    if (support == 0).any():
        empty = np.flatnonzero(support == 0).tolist()
        raise ValidationError(f"balanced accuracy undefined: classes {empty} have no samples")
    recalls = cm.true_positives() / support
    return float(recalls.mean())


def cohens_kappa(cm: ConfusionMatrix) -> float:
    """Agreement corrected for chance: (p_o - p_e) / (1 - p_e)."""
    n = cm.total
    if n == 0:
        raise ValidationError("kappa undefined on an empty confusion matrix")
    p_o = cm.true_positives().sum() / n
    p_e = float((cm.support() * cm.predicted()).sum()) / (n * n)
    if p_e >= 1.0:
        raise ValidationError("kappa undefined: chance agreement is 1 (degenerate marginals)")
    return float((p_o - p_e) / (1.0 - p_e))


def f1_scores(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """One-vs-rest per-class F1 and the support-weighted mean.

    Empty denominators yield an F1 of 0 by convention.
    """
    tp = cm.true_positives()
    fp = cm.predicted() - tp
    fn = cm.support() - tp
    denom = 2 * tp + fp + fn
    per_class = np.divide(2 * tp, denom, out=np.zeros(cm.n_classes), where=denom > 0)
    support = cm.support()
    if support.sum() == 0:
        raise ValidationError("F1 undefined on an empty confusion matrix")
    weighted = float((per_class * support).sum() / support.sum())
    return per_class, weighted


@dataclass
class ScoredPredictions:
    """Per-sample true label and score vector over the classes."""

    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim == 1:
            self.scores = np.stack([1.0 - self.scores, self.scores], axis=1)
        if self.scores.ndim != 2 or self.scores.shape[0] != self.labels.shape[0]:
            raise ValidationError(
                f"scores {self.scores.shape} do not match labels {self.labels.shape}")
        if not np.isfinite(self.scores).all():
            raise ValidationError("scores must be finite")

    def positive_scores(self) -> np.ndarray:
        if self.scores.shape[1] != 2:
            raise ValidationError(
                f"threshold-curve metrics need binary scores, got {self.scores.shape[1]} classes")
        return self.scores[:, 1]


def auroc(preds: ScoredPredictions) -> float:
    """P(score+ > score-) + 0.5 P(tie), by exhaustive pair counting."""
    s = preds.positive_scores()
    pos = s[preds.labels == 1]
    neg = s[preds.labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("AUROC needs both classes present")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def auc_pr(preds: ScoredPredictions) -> float:
    """Area under precision-recall via the step rule over descending
    distinct-score thresholds."""
    s = preds.positive_scores()
    y = preds.labels
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise ValidationError("AUC-PR needs at least one positive sample")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    area = 0.0
    prev_recall = 0.0
    tp = 0
    seen = 0
    i = 0
    n = len(s_sorted)
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int((y_sorted[i:j] == 1).sum())
        seen += j - i
        precision = tp / seen
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(area)


@dataclass
class MetricReport:
    task: str
    n_classes: int
    metrics: dict[str, float] = field(default_factory=dict)

    def lines(self) -> str:
        body = "\n".join(f"{k}\t{v:.6f}" for k, v in self.metrics.items())
        return body + "\n"

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "n_classes": self.n_classes,
                           "metrics": self.metrics}, indent=2, sort_keys=True)


def report_from_scores(labels: np.ndarray, scores: np.ndarray) -> MetricReport:
    """Metric set per task arity: balanced accuracy + AUROC + AUC-PR for
    binary tasks, balanced accuracy + kappa + weighted F1 for multi-class."""
    preds = ScoredPredictions(labels, scores)
    n_classes = preds.scores.shape[1]
    y_pred = preds.scores.argmax(axis=1)
    cm = ConfusionMatrix.from_predictions(preds.labels, y_pred, n_classes)
    if n_classes == 2:
        report = MetricReport(task="binary", n_classes=2)
        report.metrics["balanced_accuracy"] = balanced_accuracy(cm)
        report.metrics["auroc"] = auroc(preds)
        report.metrics["auc_pr"] = auc_pr(preds)
    else:
        report = MetricReport(task="multiclass", n_classes=n_classes)
        report.metrics["balanced_accuracy"] = balanced_accuracy(cm)
        report.metrics["cohens_kappa"] = cohens_kappa(cm)
        _, weighted = f1_scores(cm)
        report.metrics["weighted_f1"] = weighted
    return report
