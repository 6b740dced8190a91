"""ROC construction, AUC, bootstrap confidence intervals, partial AUC and
paired significance testing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline


class EvalError(Exception):
    pass


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    group_ids: np.ndarray | None = None  # case ids for grouped resampling

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape:
            raise EvalError("scores and labels must have equal length")
        if self.group_ids is not None:
            self.group_ids = np.asarray(self.group_ids)
            if self.group_ids.shape != self.scores.shape:
                raise EvalError("group_ids must match scores in length")

    def check_two_classes(self):
        if len(np.unique(self.labels)) < 2:
            raise EvalError("AUC undefined with a single class")


@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    bootstrap_aucs: np.ndarray = field(default_factory=lambda: np.array([]))
    ci95: tuple[float, float] = (float("nan"), float("nan"))
    mean_curve: tuple[np.ndarray, np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "auc": self.auc,
            "ci95": list(self.ci95),
            "n_bootstrap": int(self.bootstrap_aucs.size),
        }
        out.update(self.metadata)
        return out


def roc_curve(scores: np.ndarray, labels: np.ndarray):
    """Step-curve operating points, FPR/TPR monotone from (0,0) to (1,1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    # merge threshold ties: keep the last point of each distinct score
    distinct = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0.0, tp[distinct] / n_pos]
    fpr = np.r_[0.0, fp[distinct] / n_neg]
    return fpr, tpr


def auc_from_curve(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.trapezoid(tpr, fpr))


def roc_auc(scored: ScoredSet) -> RocResult:
    """AUC equals the Mann-Whitney statistic P(s+ > s-) + P(tie)/2."""
    scored.check_two_classes()
    fpr, tpr = roc_curve(scored.scores, scored.labels)
    return RocResult(fpr=fpr, tpr=tpr, auc=auc_from_curve(fpr, tpr))


def partial_auc(scored: ScoredSet, interval=(0.0, 0.2)) -> float:
    """Area under ROC for FPR in the interval, normalized by its width."""
    lo, hi = interval
    if not (0.0 <= lo < hi <= 1.0):
        raise EvalError("invalid FPR interval")
    fpr, tpr = roc_curve(scored.scores, scored.labels)
    return _pauc_from_curve(fpr, tpr, lo, hi)


def _pauc_from_curve(fpr, tpr, lo, hi) -> float:
    # clip every polyline segment to the FPR window, vectorized trapezoids
    x0, x1 = fpr[:-1], fpr[1:]
    y0, y1 = tpr[:-1], tpr[1:]
    keep = (x1 > lo) & (x0 < hi) & (x1 > x0)
    x0, x1, y0, y1 = x0[keep], x1[keep], y0[keep], y1[keep]
    a = np.maximum(x0, lo)
    b = np.minimum(x1, hi)
    slope = (y1 - y0) / (x1 - x0)
    ya = y0 + slope * (a - x0)
    yb = y0 + slope * (b - x0)
    return float(np.sum(0.5 * (ya + yb) * (b - a)) / (hi - lo))


def _resample_indices(scored: ScoredSet, rng: np.random.Generator) -> np.ndarray:
    n = scored.scores.size
    if scored.group_ids is None:
        return rng.integers(0, n, n)
    groups, inverse = np.unique(scored.group_ids, return_inverse=True)
    picked = rng.integers(0, groups.size, groups.size)
    parts = [np.flatnonzero(inverse == g) for g in picked]
    return np.concatenate(parts) if parts else np.array([], dtype=int)


FPR_GRID = np.linspace(0.0, 1.0, 512)
MAX_REDRAWS = 1000


def bootstrap_ci(scored: ScoredSet, n_boot: int = 5000, seed: int = 0,
                 compute_mean_curve: bool = True) -> RocResult:
    """Percentile bootstrap over resampled cases (or candidates when no
    group ids are given); mean ROC via natural cubic splines on a fixed grid."""
    if n_boot < 1:
        raise EvalError("n_boot must be >= 1")
    scored.check_two_classes()
    base = roc_auc(scored)
    rng = np.random.default_rng(seed)
    aucs = np.empty(n_boot)
    curve_sum = np.zeros_like(FPR_GRID)
    redraws = 0
    for i in range(n_boot):
        while True:
            idx = _resample_indices(scored, rng)
            labels = scored.labels[idx]
            if idx.size and 0 < labels.sum() < labels.size:
                break
            redraws += 1
            if redraws > MAX_REDRAWS:
                raise EvalError("too many degenerate bootstrap resamples")
        fpr, tpr = roc_curve(scored.scores[idx], labels)
        aucs[i] = auc_from_curve(fpr, tpr)
        if compute_mean_curve:
            ufpr = np.unique(fpr)
            if ufpr.size >= 2:
                # tpr is nondecreasing, so the last point per fpr is its max
                utpr = tpr[np.searchsorted(fpr, ufpr, side="right") - 1]
                spline = CubicSpline(ufpr, utpr, bc_type="natural")
                curve_sum += np.clip(spline(FPR_GRID), 0.0, 1.0)
            else:
                curve_sum += FPR_GRID
    lo, hi = np.percentile(aucs, [2.5, 97.5])
    mean_curve = (FPR_GRID.copy(), curve_sum / n_boot) if compute_mean_curve else None
    return RocResult(
        fpr=base.fpr, tpr=base.tpr, auc=base.auc,
        bootstrap_aucs=aucs, ci95=(float(lo), float(hi)), mean_curve=mean_curve,
        metadata={
            "n_redraws": redraws,
            "resampling_unit": "candidate" if scored.group_ids is None else "case",
        },
    )


def significance_test(set_a: ScoredSet, set_b: ScoredSet, metric: str = "auc",
                      interval=(0.0, 0.2), n_boot: int = 5000, seed: int = 0) -> float:
    """Paired bootstrap two-sided p-value for the metric difference.

    Both sets must score the identical candidates; each iteration draws one
    resample and evaluates both models on it.
    """
    if set_a.scores.size != set_b.scores.size or not np.array_equal(set_a.labels, set_b.labels):
        raise EvalError("significance test requires paired sets over identical candidates")
    if set_a.group_ids is not None and set_b.group_ids is not None and \
            not np.array_equal(set_a.group_ids, set_b.group_ids):
        raise EvalError("paired sets must share group ids")

    def stat(scores, labels):
        fpr, tpr = roc_curve(scores, labels)
        if metric == "auc":
            return auc_from_curve(fpr, tpr)
        if metric == "pauc":
            return _pauc_from_curve(fpr, tpr, *interval)
        raise EvalError(f"unknown metric {metric!r}")

    rng = np.random.default_rng(seed)
    diffs = np.empty(n_boot)
    redraws = 0
    for i in range(n_boot):
        while True:
            idx = _resample_indices(set_a, rng)
            labels = set_a.labels[idx]
            if idx.size and 0 < labels.sum() < labels.size:
                break
            redraws += 1
            if redraws > MAX_REDRAWS:
                raise EvalError("too many degenerate bootstrap resamples")
        diffs[i] = stat(set_a.scores[idx], labels) - stat(set_b.scores[idx], labels)
    # two-sided: twice the smaller tail of the bootstrap difference distribution
    lo = (np.sum(diffs <= 0) + 1) / (n_boot + 1)
    hi = (np.sum(diffs >= 0) + 1) / (n_boot + 1)
    return float(min(1.0, 2.0 * min(lo, hi)))
