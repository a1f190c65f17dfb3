"""Correlation, shape, classifier and aggregate statistics.

Conventions: population central moments, excess kurtosis, Mann-Whitney AUC
with ties counted one half, step-wise average precision, percentile
bootstrap intervals with within-task (stratified) resampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _sps


class UndefinedStatistic(ValueError):
    """The statistic is undefined for this input (constant data, one class...)."""


def _pair(x, y, min_n=2):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    if x.size < min_n:
        raise ValueError(f"need at least {min_n} pairs")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("non-finite entries")
    return x, y


def rank_average(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their ranks."""
    return _sps.rankdata(np.asarray(x, dtype=np.float64), method="average")


def _fsum(v) -> float:
    return math.fsum(v.tolist())


def pearson(x, y) -> float:
    """Product-moment correlation.

    Sums are correctly rounded, so the result does not depend on the order
    of the pairs.
    """
    x, y = _pair(x, y)
    n = x.size
    dx = x - _fsum(x) / n
    dy = y - _fsum(y) / n
    sxx = _fsum(dx * dx)
    syy = _fsum(dy * dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedStatistic("undefined correlation: constant input")
    r = _fsum(dx * dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x, y = _pair(x, y)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedStatistic("undefined correlation: constant input")
    return pearson(rank_average(x), rank_average(y))


def _central(xs, min_n=3):
    x = np.asarray(xs, dtype=np.float64).ravel()
    if x.size < min_n:
        raise ValueError(f"need at least {min_n} values")
    d = x - x.mean()
    m2 = float(np.mean(d * d))
    if m2 == 0.0:
        raise UndefinedStatistic("zero variance")
    return d, m2


def skewness(xs) -> float:
    d, m2 = _central(xs)
    return float(np.mean(d ** 3) / m2 ** 1.5)


def kurtosis(xs) -> float:
    """Excess kurtosis ``m4 / m2^2 - 3``."""
    d, m2 = _central(xs)
    return float(np.mean(d ** 4) / m2 ** 2 - 3.0)


def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    if y.all() or not y.any():
        raise UndefinedStatistic("both classes must be present")
    return s, y


def roc_auc(scores, labels) -> float:
    s, y = _binary(scores, labels)
    ranks = rank_average(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(s, y):
    """TP and FP counts at each distinct score, from the highest down."""
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    return s_sorted[last], tp[last], fp[last]


def pr_curve(scores, labels) -> list[tuple[float, float, float]]:
    """``(recall, precision, threshold)`` at every distinct threshold, descending."""
    s, y = _binary(scores, labels)
    thr, tp, fp = _threshold_counts(s, y)
    n_pos = int(y.sum())
    return [(float(t / n_pos), float(t / (t + f)), float(th)) for th, t, f in zip(thr, tp, fp)]


def average_precision(scores, labels) -> float:
    """``sum_k (R_k - R_{k-1}) P_k`` over descending thresholds, ``R_0 = 0``."""
    ap = 0.0
    prev = 0.0
    for recall, precision, _ in pr_curve(scores, labels):
        ap += (recall - prev) * precision
        prev = recall
    return float(ap)


def _as_tasks(values_by_task):
    if isinstance(values_by_task, dict):
        keys = sorted(values_by_task)
        tasks = [np.asarray(values_by_task[k], dtype=np.float64).ravel() for k in keys]
    else:
        keys = list(range(len(values_by_task)))
        tasks = [np.asarray(v, dtype=np.float64).ravel() for v in values_by_task]
    if not tasks or any(t.size == 0 for t in tasks):
        raise ValueError("every task needs at least one value")
    return keys, tasks


def iqm(x) -> float:
    """Interquartile mean: mean of the middle 50% (25% trimmed from each end)."""
    return float(_sps.trim_mean(np.asarray(x, dtype=np.float64).ravel(), 0.25))


_STATISTICS = {
    "mean": lambda x: float(np.mean(x)),
    "median": lambda x: float(np.median(x)),
    "iqm": iqm,
}


def bootstrap_ci(values_by_task, statistic="mean", resamples=2000, level=0.95, seed=0):
    """Point estimate and percentile bootstrap interval of a pooled statistic.

    Values are resampled with replacement within each task, pooled and the
    statistic recomputed.  Returns ``(point, lo, hi)``.
    """
    if resamples < 100:
        raise ValueError("need at least 100 bootstrap resamples")
    fn = _STATISTICS[statistic]
    _, tasks = _as_tasks(values_by_task)
    pooled = np.concatenate(tasks)
    point = fn(pooled)
    rng = np.random.default_rng(seed)
    idx = [rng.integers(t.size, size=(resamples, t.size)) for t in tasks]
    boot = np.concatenate([t[i] for t, i in zip(tasks, idx)], axis=1)
    if statistic == "mean":
        dist = boot.mean(axis=1)
    elif statistic == "median":
        dist = np.median(boot, axis=1)
    else:
        dist = _sps.trim_mean(boot, 0.25, axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(dist, [alpha, 1.0 - alpha])
    return float(point), float(min(lo, point)), float(max(hi, point))


def _prob_greater(x, y):
    """P(X > Y) + 0.5 P(X = Y) over all cross pairs."""
    ys = np.sort(y)
    below = np.searchsorted(ys, x, side="left")
    upto = np.searchsorted(ys, x, side="right")
    return float((below.sum() + 0.5 * (upto - below).sum()) / (x.size * y.size))


def probability_of_improvement(scores_x, scores_y) -> float:
    """Task-averaged probability that X beats Y, ties counted one half."""
    kx, tx = _as_tasks(scores_x)
    ky, ty = _as_tasks(scores_y)
    if kx != ky:
        raise ValueError("score sets cover different tasks")
    return float(np.mean([_prob_greater(a, b) for a, b in zip(tx, ty)]))


def probability_of_improvement_ci(scores_x, scores_y, resamples=2000, level=0.95, seed=0):
    point = probability_of_improvement(scores_x, scores_y)
    _, tx = _as_tasks(scores_x)
    _, ty = _as_tasks(scores_y)
    rng = np.random.default_rng(seed)
    dist = np.empty(resamples)
    for b in range(resamples):
        dist[b] = np.mean([_prob_greater(a[rng.integers(a.size, size=a.size)],
                                         c[rng.integers(c.size, size=c.size)]) for a, c in zip(tx, ty)])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(dist, [alpha, 1.0 - alpha])
    return point, float(min(lo, point)), float(max(hi, point))


def welch_t_test(a, b):
    """Unequal-variance two-sample t-test; returns ``(t, dof, two-sided p)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least two values per group")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0:
        raise UndefinedStatistic("zero variance in both groups")
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    dof = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = 2.0 * _sps.t.sf(abs(t), dof)
    return float(t), float(dof), float(p)


@dataclass
class Interval:
    point: float
    lo: float
    hi: float
    level: float = 0.95

    def to_dict(self):
        return {"point": self.point, "lo": self.lo, "hi": self.hi, "level": self.level}


@dataclass
class AggregateReport:
    metrics: dict = field(default_factory=dict)  # name -> Interval
    probability_of_improvement: Interval | None = None
    tasks: list = field(default_factory=list)
    per_task: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "probability_of_improvement": None if self.probability_of_improvement is None
            else self.probability_of_improvement.to_dict(),
            "tasks": list(self.tasks),
            "per_task": {str(k): list(map(float, v)) for k, v in self.per_task.items()},
        }


def aggregate(values_by_task: dict, baseline_by_task: dict | None = None, resamples=2000,
              level=0.95, seed=0) -> AggregateReport:
    keys, _ = _as_tasks(values_by_task)
    rep = AggregateReport(tasks=[str(k) for k in keys],
                          per_task={k: list(np.asarray(values_by_task[k], float).ravel()) for k in keys})
    for name in ("mean", "median", "iqm"):
        rep.metrics[name] = Interval(*bootstrap_ci(values_by_task, name, resamples, level, seed), level)
    if baseline_by_task is not None:
        rep.probability_of_improvement = Interval(
            *probability_of_improvement_ci(values_by_task, baseline_by_task, max(100, resamples // 4), level, seed),
            level)
    return rep
