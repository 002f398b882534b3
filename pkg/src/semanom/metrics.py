"""Precision/recall, PR curves and average precision for anomaly scores.

Anomalies are the positive class and a higher score means more anomalous.
An example is predicted positive when ``score >= t``. Tied scores share a
single threshold, so results never depend on input order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ScoredExample:
    score: float
    is_anomaly: bool

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> float:
        # nothing predicted positive: no false positives, precision 1 by convention
        predicted = self.tp + self.fp
        return 1.0 if predicted == 0 else self.tp / predicted

    @property
    def recall(self) -> float:
        positives = self.tp + self.fn
        if positives == 0:
            raise ValueError("recall is undefined without positive examples")
        return self.tp / positives


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass(frozen=True)
class APResult:
    average_precision: float
    skew: float
    n_pos: int
    n_neg: int


@dataclass(frozen=True)
class TrialAggregate:
    mean: float
    std: float
    n_trials: int


def scored_from_arrays(scores, is_anomaly) -> list[ScoredExample]:
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(is_anomaly, dtype=bool)
    if scores.shape != flags.shape:
        raise ValueError(f"{scores.shape[0]} scores but {flags.shape[0]} anomaly flags")
    return [ScoredExample(float(s), bool(f)) for s, f in zip(scores, flags)]


def _arrays(scored: Sequence[ScoredExample]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.fromiter((e.score for e in scored), dtype=np.float64, count=len(scored))
    flags = np.fromiter((e.is_anomaly for e in scored), dtype=bool, count=len(scored))
    return scores, flags


def confusion_at(scored: Sequence[ScoredExample], t: float) -> ConfusionCounts:
    scores, flags = _arrays(scored)
    pred = scores >= t
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & flags)),
        fp=int(np.count_nonzero(pred & ~flags)),
        fn=int(np.count_nonzero(~pred & flags)),
        tn=int(np.count_nonzero(~pred & ~flags)),
    )


def _curve(scores: np.ndarray, flags: np.ndarray):
    n_pos = int(np.count_nonzero(flags))
    if n_pos == 0:
        raise ValueError("undefined recall: no anomalous (positive) examples")
    order = np.argsort(-scores, kind="stable")
    s, f = scores[order], flags[order]
    tp = np.cumsum(f)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    predicted = ends + 1
    return s[ends], tp_at / predicted, tp_at / n_pos, n_pos


def pr_curve(scored: Sequence[ScoredExample]) -> list[PRPoint]:
    """One point per distinct score, thresholds descending; the last point has recall 1."""
    thresholds, precision, recall, _ = _curve(*_arrays(scored))
    return [PRPoint(float(t), float(p), float(r)) for t, p, r in zip(thresholds, precision, recall)]


def average_precision_arrays(scores, is_anomaly) -> APResult:
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(is_anomaly, dtype=bool)
    _, precision, recall, n_pos = _curve(scores, flags)
    ap = float(np.sum(precision * np.diff(recall, prepend=0.0)))
    n = len(flags)
    return APResult(ap, n_pos / n, n_pos, n - n_pos)


def average_precision(scored: Sequence[ScoredExample]) -> APResult:
    """Sum over thresholds of precision times the recall gained at that threshold."""
    return average_precision_arrays(*_arrays(scored))


def aggregate_trials(values: Sequence[float]) -> TrialAggregate:
    """Mean and sample standard deviation (n - 1 denominator; 0 for one value)."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("cannot aggregate an empty list of trial values")
    std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return TrialAggregate(float(vals.mean()), std, int(vals.size))


# ---------------------------------------------------------------------------
# CSV exchange


def fmt17(x: float) -> str:
    return f"{x:.17g}"


def write_pr_csv(points: Sequence[PRPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for p in points:
            w.writerow([fmt17(p.threshold), fmt17(p.precision), fmt17(p.recall)])


def write_scores_csv(scored: Sequence[ScoredExample], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_index", "score", "is_anomaly"])
        for i, e in enumerate(scored):
            w.writerow([i, fmt17(e.score), int(e.is_anomaly)])


def read_scores_csv(path, flags_path=None) -> list[ScoredExample]:
    """Read ``example_index,score,is_anomaly`` rows.

    When ``flags_path`` is given, anomaly flags are taken from its
    ``example_index,is_anomaly`` rows instead, matched by index.
    """
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "score" not in rows[0] or "example_index" not in rows[0]:
        raise ValueError(f"{path}: expected columns example_index,score[,is_anomaly]")
    if flags_path is not None:
        with open(Path(flags_path), newline="") as fh:
            flag_rows = list(csv.DictReader(fh))
        if not flag_rows or "is_anomaly" not in flag_rows[0]:
            raise ValueError(f"{flags_path}: expected columns example_index,is_anomaly")
        flags = {int(r["example_index"]): r["is_anomaly"] for r in flag_rows}
        missing = [r["example_index"] for r in rows if int(r["example_index"]) not in flags]
        if missing:
            raise ValueError(f"{flags_path}: no flag for example_index {missing[0]}")
    else:
        if "is_anomaly" not in rows[0]:
            raise ValueError(f"{path}: no is_anomaly column and no flags file given")
        flags = {int(r["example_index"]): r["is_anomaly"] for r in rows}
    return [ScoredExample(float(r["score"]), flags[int(r["example_index"])].strip() in ("1", "true", "True"))
            for r in rows]
