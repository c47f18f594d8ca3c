"""Confusion metrics, ROC/AUC, stratified folds and cross-validation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

METRIC_NAMES = ("ACC", "SEN", "SPE", "BAC", "PPV", "NPV", "F1", "AUC")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(predictions, truths, positive_class: int = 1) -> ConfusionCounts:
    """One-vs-rest counts with ``positive_class`` as the positive label."""
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions but {true.size} truths")
    pp = pred == positive_class
    tp_ = true == positive_class
    return ConfusionCounts(int(np.sum(pp & tp_)), int(np.sum(~pp & ~tp_)),
                           int(np.sum(pp & ~tp_)), int(np.sum(~pp & tp_)))


@dataclass(frozen=True)
class MetricsReport:
    """Scores in [0, 1]; ``None`` marks a metric whose denominator is zero."""

    ACC: float | None = None
    SEN: float | None = None
    SPE: float | None = None
    BAC: float | None = None
    PPV: float | None = None
    NPV: float | None = None
    F1: float | None = None
    AUC: float | None = None

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def defined(self) -> dict:
        return {k: v for k, v in self.as_dict().items() if v is not None}


def _ratio(num, den):
    return num / den if den else None


def metrics(c: ConfusionCounts, auc: float | None = None) -> MetricsReport:
    sen = _ratio(c.tp, c.tp + c.fn)
    spe = _ratio(c.tn, c.tn + c.fp)
    return MetricsReport(
        ACC=_ratio(c.tp + c.tn, c.total),
        SEN=sen,
        SPE=spe,
        BAC=(sen + spe) / 2 if sen is not None and spe is not None else None,
        PPV=_ratio(c.tp, c.tp + c.fp),
        NPV=_ratio(c.tn, c.tn + c.fn),
        F1=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        AUC=auc,
    )


class UndefinedAUCError(ValueError):
    pass


def roc_curve(scores, truths):
    """ROC points ``(fpr, tpr, threshold)`` from a sweep over distinct scores.

    A sample is called positive when its score is ``>= threshold``. The first
    point is ``(0, 0, inf)``; equal scores move the curve in one step.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truths).astype(bool)
    if s.shape != t.shape:
        raise ValueError(f"{s.size} scores but {t.size} truths")
    P = int(t.sum())
    N = t.size - P
    if P == 0 or N == 0:
        raise UndefinedAUCError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    points = [(0.0, 0.0, math.inf)]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        pos = int(t[i:j].sum())
        tp += pos
        fp += (j - i) - pos
        points.append((fp / N, tp / P, float(s[i])))
        i = j
    return points


def trapezoid_auc(points) -> float:
    area = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def roc_auc(scores, truths):
    """``(roc points, AUC)`` with the AUC integrated by the trapezoid rule."""
    pts = roc_curve(scores, truths)
    return pts, trapezoid_auc(pts)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple

    def train_test(self, i: int):
        test = self.folds[i]
        train = np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))
        return train, test


def stratified_kfold(labels, k: int, seed: int = 0) -> FoldPlan:
    """Shuffle each class with ``seed``, then deal its members round-robin.

    Dealing continues across classes where the previous class stopped, so
    overall fold sizes also differ by at most one.
    """
    labels = np.asarray(labels)
    n = labels.size
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"cannot make {k} folds from {n} samples")
    rng = np.random.default_rng(seed)
    assign = np.empty(n, dtype=np.int64)
    cursor = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        assign[members] = (cursor + np.arange(members.size)) % k
        cursor = (cursor + members.size) % k
    return FoldPlan(k, tuple(np.flatnonzero(assign == f) for f in range(k)))


def classification_report(truths, probs, n_classes: int, positive_class: int = 0) -> MetricsReport:
    """Metrics for one scored set.

    Binary tasks score ``positive_class`` one-vs-rest. Multiclass tasks
    macro-average the one-vs-rest metrics over classes, except ACC which is
    the plain fraction correct. Undefined per-class values are skipped in
    the macro mean.
    """
    truths = np.asarray(truths, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    pred = np.argmax(probs, axis=1)
    classes = [positive_class] if n_classes == 2 else list(range(n_classes))
    per_class = []
    for c in classes:
        try:
            _, auc = roc_auc(probs[:, c], truths == c)
        except UndefinedAUCError:
            auc = None
        per_class.append(metrics(confusion(pred, truths, c), auc))
    if n_classes == 2:
        return per_class[0]
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in per_class if getattr(r, name) is not None]
        out[name] = float(np.mean(vals)) if vals else None
    out["ACC"] = float(np.mean(pred == truths)) if truths.size else None
    return MetricsReport(**out)


def aggregate(reports):
    """Per-metric mean and population std over the folds where it is defined."""
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            m = math.fsum(vals) / len(vals)
            mean[name] = m
            std[name] = math.sqrt(math.fsum((v - m) ** 2 for v in vals) / len(vals))
        else:
            mean[name] = std[name] = None
    return MetricsReport(**mean), MetricsReport(**std)


@dataclass
class CrossvalResult:
    folds: list
    mean: MetricsReport
    std: MetricsReport
    plan: FoldPlan
    probs: np.ndarray         # out-of-fold class probabilities (N, C)
    truths: np.ndarray


# fit(train_idx, test_idx, fold) -> (len(test_idx), C) probabilities
Recipe = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def run_crossval(truths, recipe: Recipe, k: int = 10, seed: int = 0, n_classes: int | None = None,
                 positive_class: int = 0) -> CrossvalResult:
    truths = np.asarray(truths, dtype=np.int64)
    if n_classes is None:
        n_classes = int(truths.max()) + 1
    plan = stratified_kfold(truths, k, seed)
    oof = np.zeros((truths.size, n_classes))
    reports = []
    for f in range(k):
        train, test = plan.train_test(f)
        probs = np.asarray(recipe(train, test, f), dtype=np.float64)
        if probs.shape != (test.size, n_classes):
            raise ValueError(f"recipe returned shape {probs.shape}, "
                             f"expected {(test.size, n_classes)}")
        oof[test] = probs
        reports.append(classification_report(truths[test], probs, n_classes, positive_class))
    mean, std = aggregate(reports)
    return CrossvalResult(reports, mean, std, plan, oof, truths)


# -- CSV output -------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "NA"
    return repr(float(v))


def write_metrics_csv(result: CrossvalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fold",) + METRIC_NAMES)
        for i, r in enumerate(result.folds):
            w.writerow([str(i)] + [_fmt(getattr(r, m)) for m in METRIC_NAMES])
        w.writerow(["mean"] + [_fmt(getattr(result.mean, m)) for m in METRIC_NAMES])
        w.writerow(["std"] + [_fmt(getattr(result.std, m)) for m in METRIC_NAMES])


def write_report_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_NAMES)
        w.writerow([_fmt(getattr(report, m)) for m in METRIC_NAMES])


def write_roc_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr", "threshold"))
        for fpr, tpr, thr in points:
            w.writerow((repr(float(fpr)), repr(float(tpr)), "inf" if math.isinf(thr) else repr(float(thr))))


def write_embedding_csv(points, labels, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("x", "y", "label"))
        for (x, y), lab in zip(np.asarray(points), labels):
            w.writerow((repr(float(x)), repr(float(y)), str(lab)))
