"""Virtual-screening and affinity-ranking metrics.

Ranked positions come from sorting scores in descending order and breaking
ties by ascending id (input position when no ids are given).  BEDROC and EF
are sensitive to that tie-break; AUROC counts tied active/inactive pairs as
one half instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "LabeledRanking",
    "MetricError",
    "ranking_order",
    "auroc",
    "bedroc",
    "enrichment_factor",
    "roc_enrichment",
    "pearson",
    "spearman",
    "REPORT_COLUMNS",
    "screening_row",
]


class MetricError(ValueError):
    """The metric is undefined for this input (e.g. a single class)."""


@dataclass(frozen=True)
class LabeledRanking:
    scores: np.ndarray
    labels: np.ndarray
    affinities: Optional[np.ndarray] = None
    ids: Optional[Sequence[str]] = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels).astype(bool)
        if scores.ndim != 1 or scores.shape != labels.shape:
            raise ValueError("scores and labels must be 1-D and of equal length")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        if self.affinities is not None:
            aff = np.asarray(self.affinities, dtype=np.float64)
            if aff.shape != scores.shape:
                raise ValueError("affinities must match scores in length")
            object.__setattr__(self, "affinities", aff)
        if self.ids is not None and len(self.ids) != scores.size:
            raise ValueError("ids must match scores in length")

    @property
    def n(self) -> int:
        return self.scores.size

    @property
    def n_actives(self) -> int:
        return int(self.labels.sum())


def _two_classes(data: LabeledRanking) -> None:
    if data.n_actives == 0 or data.n_actives == data.n:
        raise MetricError("metric needs at least one active and one inactive")


def ranking_order(scores, ids=None) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    if ids is None:
        tie = np.arange(scores.size)
    else:
        tie = np.empty(scores.size, dtype=np.int64)
        tie[np.argsort(np.asarray(ids, dtype=object), kind="stable")] = np.arange(scores.size)
    return np.lexsort((tie, -scores))


def _ranked_labels(data: LabeledRanking) -> np.ndarray:
    return data.labels[ranking_order(data.scores, data.ids)]


def auroc(data: LabeledRanking) -> float:
    """Mann-Whitney probability that an active outscores an inactive."""
    _two_classes(data)
    ranks = rankdata(data.scores)
    p = data.n_actives
    q = data.n - p
    return float((ranks[data.labels].sum() - p * (p + 1) / 2.0) / (p * q))


def bedroc(data: LabeledRanking, alpha: float = 80.5) -> float:
    """Boltzmann-enhanced discrimination of ROC with early-recognition parameter ``alpha``."""
    _two_classes(data)
    n, n_act = data.n, data.n_actives
    ranks = np.flatnonzero(_ranked_labels(data)) + 1.0
    ra = n_act / n
    sum_exp = np.exp(-alpha * ranks / n).sum()
    random_sum = ra * (1.0 - np.exp(-alpha)) / np.expm1(alpha / n)
    scale = ra * np.sinh(alpha / 2.0) / (np.cosh(alpha / 2.0) - np.cosh(alpha / 2.0 - alpha * ra))
    offset = 1.0 / (1.0 - np.exp(alpha * (1.0 - ra)))
    return float(sum_exp / random_sum * scale + offset)


def _cutoff(percent: float, n: int) -> int:
    x = percent * n / 100.0
    return max(1, math.ceil(x - 1e-9 * max(1.0, x)))


def enrichment_factor(data: LabeledRanking, alpha_percent: float) -> float:
    """Actives found in the top ``alpha_percent`` relative to random expectation.

    The cut-off keeps ``ceil(alpha/100 * N)`` compounds.
    """
    if not 0 < alpha_percent <= 100:
        raise ValueError("alpha_percent must lie in (0, 100]")
    if data.n_actives == 0:
        raise MetricError("enrichment factor needs at least one active")
    top = _ranked_labels(data)[: _cutoff(alpha_percent, data.n)].sum()
    return float(top / (data.n_actives * alpha_percent / 100.0))


def roc_enrichment(data: LabeledRanking, x_percent: float, variant: str = "interpolated") -> float:
    """True-positive rate at false-positive rate ``x%``, divided by ``x/100``.

    ``variant="interpolated"`` reads the TPR off the ROC polyline at exactly
    FPR = x%.  The raw-count forms ``TP*N / (P*FP)`` are available as
    ``"library"`` (N = library size) and ``"inactive"`` (N = inactive count),
    with ``FP = ceil(x% of the inactives)`` and ``TP`` the actives ranked
    above that many inactives.
    """
    if not 0 < x_percent <= 100:
        raise ValueError("x_percent must lie in (0, 100]")
    _two_classes(data)
    ranked = _ranked_labels(data)
    p = data.n_actives
    q = data.n - p
    # actives seen before the k-th inactive, k = 1..q (plus "all" for k > q)
    tp_before = np.cumsum(ranked)[~ranked]
    x = x_percent / 100.0
    if variant == "interpolated":
        k = int(math.floor(x * q + 1e-9))
        tp = p if k >= q else int(tp_before[k])
        return float(tp / p / x)
    if variant in ("library", "inactive"):
        fp = _cutoff(x_percent, q)
        tp = int(tp_before[fp - 1])
        denom_n = data.n if variant == "library" else q
        return float(tp * denom_n / (p * fp))
    raise ValueError(f"unknown RE variant {variant!r}")


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise MetricError("correlation is undefined for a constant vector")
    return float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def spearman(x, y) -> float:
    """Rank correlation; the squared-rank-difference formula when there are no ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("spearman needs two equal-length vectors of length >= 2")
    rx, ry = rankdata(x), rankdata(y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise MetricError("correlation is undefined for a constant vector")
    n = x.size
    if len(np.unique(x)) == n and len(np.unique(y)) == n:
        d = rx - ry
        return float(1.0 - 6.0 * np.dot(d, d) / (n * (n * n - 1.0)))
    return pearson(rx, ry)


REPORT_COLUMNS = ("target", "AUROC", "BEDROC80.5", "EF0.5", "EF1", "EF2", "EF5",
                  "RE0.5", "RE1", "RE2", "RE5", "Pearson", "Spearman")


def _or_nan(fn, *args):
    try:
        return fn(*args)
    except (MetricError, ValueError):
        return float("nan")


def screening_row(data: LabeledRanking) -> dict:
    """All report columns (except ``target``) for one ranked library.

    Undefined values are NaN.  Correlations use the ligands that carry an
    affinity.
    """
    row = {
        "AUROC": _or_nan(auroc, data),
        "BEDROC80.5": _or_nan(bedroc, data, 80.5),
    }
    for a in (0.5, 1, 2, 5):
        row[f"EF{a}"] = _or_nan(enrichment_factor, data, a)
    for a in (0.5, 1, 2, 5):
        row[f"RE{a}"] = _or_nan(roc_enrichment, data, a)
    row["Pearson"] = row["Spearman"] = float("nan")
    if data.affinities is not None:
        known = np.isfinite(data.affinities)
        if known.sum() >= 2:
            row["Pearson"] = _or_nan(pearson, data.scores[known], data.affinities[known])
            row["Spearman"] = _or_nan(spearman, data.scores[known], data.affinities[known])
    return row
