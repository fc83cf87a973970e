"""Exact classification metrics: F1/precision/recall, rank-based ROC-AUC
with half-credit ties, and average precision with deterministic id
tie-breaks.  Conventions: 0/0 ratios are 0; single-class ROC and
zero-positive AP raise MetricUndefinedError (reported as absent, never 0)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, MetricUndefinedError


def f1_precision_recall(preds, labels) -> tuple[float, float, float]:
    preds = np.asarray(preds, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    if preds.shape != labels.shape:
        raise DimensionError("predictions and labels must have equal length")
    tp = int(np.sum(preds & labels))
    fp = int(np.sum(preds & ~labels))
    fn = int(np.sum(~preds & labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return f1, precision, recall


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ties averaged (midrank)."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimator: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(
            "roc_auc undefined: needs at least one positive and one negative"
        )
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores, labels, ids=None) -> float:
    """Mean precision-at-rank over positives, descending scores; ties in
    score are broken by ascending id so the ranking is total."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefinedError("average_precision undefined: no positives")
    if ids is None:
        ids = np.arange(len(scores))
    id_rank = np.argsort(np.argsort(np.asarray(ids, dtype=object), kind="stable"))
    order = np.lexsort((id_rank, -scores))
    hits = labels[order].astype(np.float64)
    cum_tp = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1, dtype=np.float64)
    return float(np.sum(hits * cum_tp / ranks) / n_pos)


@dataclass
class MetricsReport:
    """Per-label metric values plus supports, serializable to CSV."""

    per_label: dict[str, dict[str, float]] = field(default_factory=dict)
    support: dict[str, int] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)  # e.g. k used

    def add(self, label: str, metric: str, value: float, support: int) -> None:
        if value is not None and not -1e-9 <= value <= 1.0 + 1e-9:
            raise ValueError(f"metric {metric} for {label} outside [0, 1]")
        self.per_label.setdefault(label, {})[metric] = value
        self.support[label] = support

    def macro(self, metric: str) -> float | None:
        vals = [m[metric] for m in self.per_label.values()
                if m.get(metric) is not None]
        return float(np.mean(vals)) if vals else None

    def rows(self) -> list[tuple[str, str, str, int]]:
        out = []
        metrics_seen = []
        for label in sorted(self.per_label):
            for metric in sorted(self.per_label[label]):
                if metric not in metrics_seen:
                    metrics_seen.append(metric)
                value = self.per_label[label][metric]
                text = "" if value is None else f"{value:.6f}"
                out.append((label, metric, text, self.support[label]))
        total = sum(self.support.values())
        for metric in sorted(metrics_seen):
            m = self.macro(metric)
            if m is not None:
                out.append(("macro", metric, f"{m:.6f}", total))
        return out

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "metric", "value", "support"])
            for row in self.rows():
                writer.writerow(row)
