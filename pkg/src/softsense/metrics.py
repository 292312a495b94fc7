"""Rank-based AUROC and recall with per-task confusion counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _midranks(scores):
    """1-based ranks with ties receiving the mean rank of their group."""
    n = scores.size
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    boundaries = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[boundaries[1:], n]
    group_mid = (boundaries + ends + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(group_mid, ends - boundaries)
    return ranks


def auroc(scores, labels):
    """Area under the ROC curve via the rank-sum statistic.

    Equals the probability that a random positive outranks a random
    negative, with ties counting one half. Requires at least one sample of
    each class.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise ValueError("scores and labels must have the same length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs at least one positive and one negative")
    ranks = _midranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def tpr(predictions, labels):
    """Recall: true positives over all actual positives."""
    p = np.asarray(predictions).ravel()
    y = np.asarray(labels).ravel()
    if p.size != y.size:
        raise ValueError("predictions and labels must have the same length")
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise ValueError("tpr needs at least one positive")
    tp = int(((p == 1) & (y == 1)).sum())
    return tp / n_pos


def confusion_counts(predictions, labels):
    p = np.asarray(predictions).ravel()
    y = np.asarray(labels).ravel()
    tp = int(((p == 1) & (y == 1)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    tn = int(((p == 0) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    return tp, fp, tn, fn


@dataclass
class TaskMetrics:
    auroc: float
    tpr: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_pos: int
    n_neg: int

    def to_dict(self):
        return {
            "auroc": self.auroc,
            "tpr": self.tpr,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


@dataclass
class MetricReport:
    """Per-task metrics keyed by 0-based task index."""

    tasks: dict

    def to_dict(self):
        return {"tasks": {f"task{k + 1}": m.to_dict() for k, m in sorted(self.tasks.items())}}

    @classmethod
    def from_dict(cls, d):
        tasks = {}
        for name, m in d["tasks"].items():
            tasks[int(name.removeprefix("task")) - 1] = TaskMetrics(**m)
        return cls(tasks)

    def mean_auroc(self):
        return float(np.mean([m.auroc for m in self.tasks.values()]))

    def mean_tpr(self):
        return float(np.mean([m.tpr for m in self.tasks.values()]))


def evaluate_split(params, samples, thresholds):
    """Score a frozen model on labeled samples and report per-task metrics."""
    from .model import assemble_labels, as_thresholds, predict_probabilities

    probs = predict_probabilities(params, samples)
    labels, mask = assemble_labels(samples)
    num_tasks = labels.shape[1]
    thr = as_thresholds(thresholds, num_tasks)
    tasks = {}
    for k in range(num_tasks):
        labeled = np.flatnonzero(mask[:, k] == 1)
        if labeled.size == 0:
            continue
        y = labels[labeled, k].astype(int)
        s = probs[labeled, k]
        score = auroc(s, y)
        preds = (s >= thr[k]).astype(int)
        tp, fp, tn, fn = confusion_counts(preds, y)
        tasks[k] = TaskMetrics(
            auroc=score,
            tpr=tpr(preds, y),
            tp=tp, fp=fp, tn=tn, fn=fn,
            n_pos=int((y == 1).sum()),
            n_neg=int((y == 0).sum()),
        )
    return MetricReport(tasks)
