"""Group fairness evaluation from confusion matrices.

All metrics are one-vs-rest per class, computed per protected group and
overall. The fairness score is 1 - GAP, where GAP aggregates per-group
deviations from the per-class overall metric: sum of absolute deviations
within a class, root-mean-square across classes. 0/0 metric cells are
"undefined" and excluded rather than imputed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationDegenerateError, ShapeError

METRICS = ("positive_rate", "tpr", "fpr", "precision", "npv")

Counts = tuple[int, int, int, int]  # TP, FP, TN, FN


@dataclass
class GroupedConfusion:
    """One-vs-rest counts per (class, group) and per class overall."""

    counts: dict[tuple[int, int], Counts]
    overall: dict[int, Counts]
    num_classes: int
    num_groups: int


def confusion_by_group(predictions, y, g, num_classes: int, num_groups: int) -> GroupedConfusion:
    predictions = np.asarray(predictions, dtype=int)
    y = np.asarray(y, dtype=int)
    g = np.asarray(g, dtype=int)
    if not (predictions.shape == y.shape == g.shape):
        raise ShapeError("predictions, y, g must have equal length")
    counts: dict[tuple[int, int], Counts] = {}
    overall: dict[int, Counts] = {}
    for c in range(num_classes):
        pred_pos = predictions == c
        true_pos = y == c
        overall[c] = _tally(pred_pos, true_pos)
        for gr in range(num_groups):
            in_g = g == gr
            counts[(c, gr)] = _tally(pred_pos & in_g, true_pos & in_g, in_g)
    return GroupedConfusion(counts=counts, overall=overall,
                            num_classes=num_classes, num_groups=num_groups)


def _tally(pred_pos, true_pos, mask=None) -> Counts:
    if mask is None:
        mask = np.ones_like(pred_pos, dtype=bool)
    tp = int(np.sum(pred_pos & true_pos & mask))
    fp = int(np.sum(pred_pos & ~true_pos & mask))
    fn = int(np.sum(~pred_pos & true_pos & mask))
    tn = int(np.sum(mask)) - tp - fp - fn
    return (tp, fp, tn, fn)


def cm_metric(counts: Counts, kind) -> float | None:
    """Confusion-matrix metric; returns None (undefined) on 0/0.

    kind is a registry name or a callable of (TP, FP, TN, FN)."""
    tp, fp, tn, fn = counts
    if callable(kind):
        return kind(tp, fp, tn, fn)
    if kind == "positive_rate":
        num, den = tp + fp, tp + fp + tn + fn
    elif kind == "tpr":
        num, den = tp, tp + fn
    elif kind == "fpr":
        num, den = fp, fp + tn
    elif kind == "precision":
        num, den = tp, tp + fp
    elif kind == "npv":
        num, den = tn, tn + fn
    else:
        raise ValueError(f"unknown metric kind {kind!r}; known: {METRICS}")
    if den == 0:
        return None
    return num / den


def gap_and_fairness(gc: GroupedConfusion, kind="tpr"
                     ) -> tuple[float, float, dict[tuple[int, int], float]]:
    """(GAP, fairness = 1 - GAP, per-(class, group) metric over defined cells)."""
    per_group: dict[tuple[int, int], float] = {}
    class_gaps = []
    any_defined = False
    for c in range(gc.num_classes):
        m_overall = cm_metric(gc.overall[c], kind)
        gap_c = 0.0
        defined_here = False
        for gr in range(gc.num_groups):
            m = cm_metric(gc.counts[(c, gr)], kind)
            if m is None or m_overall is None:
                continue
            per_group[(c, gr)] = m
            gap_c += abs(m - m_overall)
            defined_here = True
        if defined_here:
            class_gaps.append(gap_c)
            any_defined = True
    if not any_defined:
        raise EvaluationDegenerateError("no defined (class, group) metric cell")
    gap = math.sqrt(sum(v * v for v in class_gaps) / len(class_gaps))
    return gap, 1.0 - gap, per_group


def rawlsian_min(per_group_performance: dict) -> float:
    if not per_group_performance:
        raise EvaluationDegenerateError("no groups to take the minimum over")
    return min(per_group_performance.values())


def max_violation(gc: GroupedConfusion, kind="tpr") -> float:
    """Largest single |per-(class, group) metric - per-class overall metric|."""
    worst = None
    for c in range(gc.num_classes):
        m_overall = cm_metric(gc.overall[c], kind)
        if m_overall is None:
            continue
        for gr in range(gc.num_groups):
            m = cm_metric(gc.counts[(c, gr)], kind)
            if m is None:
                continue
            dev = abs(m - m_overall)
            if worst is None or dev > worst:
                worst = dev
    if worst is None:
        raise EvaluationDegenerateError("no defined (class, group) metric cell")
    return worst


def accuracy(predictions, y) -> float:
    predictions = np.asarray(predictions)
    y = np.asarray(y)
    if predictions.shape != y.shape:
        raise ShapeError("predictions and y must have equal length")
    return float(np.mean(predictions == y))


def per_group_accuracy(predictions, y, g, num_groups: int) -> dict[int, float]:
    predictions = np.asarray(predictions)
    y = np.asarray(y)
    g = np.asarray(g)
    out = {}
    for gr in range(num_groups):
        mask = g == gr
        if mask.any():
            out[gr] = float(np.mean(predictions[mask] == y[mask]))
    return out


@dataclass
class TradeoffPoint:
    performance: float
    fairness: float
    origin: str = ""


def dto(point, utopia: tuple[float, float] = (1.0, 1.0)) -> float:
    """Euclidean distance to the utopia corner; lower is better."""
    if isinstance(point, TradeoffPoint):
        perf, fair = point.performance, point.fairness
    else:
        perf, fair = point
    return math.hypot(utopia[0] - perf, utopia[1] - fair)


@dataclass
class FairnessReport:
    performance: float
    per_group_metric: dict[tuple[int, int], float]
    gap: float
    fairness: float
    rawlsian_min: float
    max_violation: float
    metric_kind: str = "tpr"

    def to_json_dict(self) -> dict:
        d = {
            "accuracy": self.performance,
            "TPR_GAP": self.gap,
            "fairness": self.fairness,
            "rawlsian_min": self.rawlsian_min,
            "max_violation": self.max_violation,
        }
        for (c, gr), v in sorted(self.per_group_metric.items()):
            d[f"{self.metric_kind}_class{c}_group{gr}"] = v
        return d


def evaluate_predictions(predictions, y, g, num_classes: int, num_groups: int,
                         kind: str = "tpr") -> FairnessReport:
    """Accuracy + group fairness in one report (the standard per-epoch eval)."""
    gc = confusion_by_group(predictions, y, g, num_classes, num_groups)
    gap, fairness, per_group = gap_and_fairness(gc, kind)
    groups_acc = per_group_accuracy(predictions, y, g, num_groups)
    return FairnessReport(
        performance=accuracy(predictions, y),
        per_group_metric=per_group,
        gap=gap,
        fairness=fairness,
        rawlsian_min=rawlsian_min(groups_acc),
        max_violation=max_violation(gc, kind),
        metric_kind=kind if isinstance(kind, str) else "custom",
    )
