"""Training-signal terms, evaluated in plain numpy.

These are the reference forward evaluations.  The model module rebuilds the
same terms on a differentiation tape and is checked against the functions
here.  Natural logarithms throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .geometry import LorentzPoint, exterior_angle, half_aperture, lorentz_distance

__all__ = [
    "LogitMatrix",
    "BucketConfig",
    "LossWeights",
    "ConeTerms",
    "NonFiniteLossError",
    "TERM_NAMES",
    "contrastive_loss",
    "listwise_rank_loss",
    "rank_decay",
    "assign_buckets",
    "quartile_thresholds",
    "cone_terms",
    "cone_loss",
    "angular_margin_reg",
    "heterogeneity_weights",
    "heterogeneity_reg",
    "total_loss",
]

TERM_NAMES = ("cont_poc", "rank_poc", "cont_seq", "rank_seq",
              "cone_rad", "cone_ang", "r_ang", "r_het")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value=None):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass(frozen=True)
class LogitMatrix:
    """Query-by-ligand similarity logits ``<q~_i, m~_j> / tau``."""

    values: np.ndarray
    tau: float = 1.0

    @classmethod
    def from_spatial(cls, query_spatial, ligand_spatial, tau: float) -> "LogitMatrix":
        if tau <= 0:
            raise ValueError("tau must be positive")
        q = np.atleast_2d(np.asarray(query_spatial, dtype=np.float64))
        m = np.atleast_2d(np.asarray(ligand_spatial, dtype=np.float64))
        return cls(q @ m.T / tau, tau)


@dataclass(frozen=True)
class BucketConfig:
    """Affinity tiers and the per-tier radial cap and angle scale.

    ``thresholds`` are on the oriented scale where *smaller* means stronger,
    so bucket 0 holds the strongest binders.  ``None`` means "quartiles of the
    training set", filled in by the trainer.
    """

    thresholds: Optional[tuple] = None
    base_radius: float = 0.1
    radius_step: float = 0.5
    base_angle_scale: float = 1.0
    angle_step: float = 0.2
    aperture_r0: float = 0.1

    def __post_init__(self):
        for name in ("base_radius", "radius_step", "base_angle_scale", "angle_step",
                     "aperture_r0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.thresholds is not None:
            t = np.asarray(self.thresholds, dtype=np.float64)
            if t.ndim != 1 or len(t) < 1 or not np.all(np.isfinite(t)):
                raise ValueError("thresholds must be a non-empty finite vector")
            if np.any(np.diff(t) <= 0):
                raise ValueError("thresholds must be strictly increasing")
            object.__setattr__(self, "thresholds", tuple(float(x) for x in t))
            if self.base_angle_scale - self.n_tiers_minus_one * self.angle_step <= 0:
                raise ValueError("base_angle_scale - K * angle_step must stay positive")

    @property
    def n_tiers_minus_one(self) -> int:
        return len(self.thresholds) - 1

    def radius_caps(self, buckets) -> np.ndarray:
        return self.base_radius + np.asarray(buckets) * self.radius_step

    def angle_scales(self, buckets) -> np.ndarray:
        return self.base_angle_scale - np.asarray(buckets) * self.angle_step


@dataclass(frozen=True)
class LossWeights:
    alpha_poc: float = 1.0
    alpha_seq: float = 0.5
    lambda_rank: float = 1.0
    gamma_cone: float = 1.0
    lambda_rad: float = 1.0
    lambda_ang_cone: float = 1.0
    lambda_ang_reg: float = 0.1
    lambda_het: float = 0.1
    margin: float = 0.1
    affinity_threshold: float = float("inf")

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "affinity_threshold":
                if np.isnan(value):
                    raise ValueError("affinity_threshold must not be NaN")
                continue
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")

    def term_coefficients(self) -> dict:
        """Multiplier applied to each raw term in the total objective."""
        return {
            "cont_poc": self.alpha_poc,
            "rank_poc": self.alpha_poc * self.lambda_rank,
            "cont_seq": self.alpha_seq,
            "rank_seq": self.alpha_seq * self.lambda_rank,
            "cone_rad": self.gamma_cone * self.lambda_rad,
            "cone_ang": self.gamma_cone * self.lambda_ang_cone,
            "r_ang": self.lambda_ang_reg,
            "r_het": self.lambda_het,
        }


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    return x - logsumexp(x, axis=axis, keepdims=True)


def contrastive_loss(logits, positives: Sequence[Sequence[int]]) -> float:
    """Symmetric InfoNCE over a query-by-candidate logit matrix.

    Row ``i`` averages ``-log softmax_row(i)[k]`` over its positives ``k``;
    the matching column term averages ``-log softmax_col(k)[i]``.  Rows
    without positives are skipped.  The result is half the sum over rows of
    both terms.
    """
    s = logits.values if isinstance(logits, LogitMatrix) else np.asarray(logits, dtype=np.float64)
    if s.ndim != 2 or s.size == 0:
        raise ValueError("contrastive_loss needs a non-empty 2-D logit matrix")
    if len(positives) != s.shape[0]:
        raise ValueError("one positive set per row is required")
    row_lsm = _log_softmax(s, axis=1)
    col_lsm = _log_softmax(s, axis=0)
    total = 0.0
    for i, pos in enumerate(positives):
        pos = np.asarray(pos, dtype=np.int64)
        if pos.size == 0:
            continue
        total += -row_lsm[i, pos].mean() - col_lsm[i, pos].mean()
    return 0.5 * total


def rank_decay(length: int) -> np.ndarray:
    """Position weights ``1 / (sqrt(B) * ln(k + 1))`` for k = 1..B."""
    k = np.arange(1, length + 1)
    return 1.0 / (np.sqrt(length) * np.log(k + 1.0))


def listwise_rank_loss(scores) -> float:
    """Plackett-Luce negative log-likelihood with position decay.

    ``scores`` must already be ordered from strongest to weakest measured
    affinity.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("listwise_rank_loss needs a non-empty score vector")
    suffix_lse = np.logaddexp.accumulate(s[::-1])[::-1]
    log_p = s - suffix_lse
    return float(-np.sum(rank_decay(s.size) * log_p))


def assign_buckets(values, thresholds) -> np.ndarray:
    """Bucket ``k`` such that ``t_k <= v < t_{k+1}``, clamped to ``[0, K]``."""
    if isinstance(thresholds, BucketConfig):
        thresholds = thresholds.thresholds
    t = np.asarray(thresholds, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    b = np.searchsorted(t, v, side="right") - 1
    return np.clip(b, 0, len(t) - 1).astype(np.int64)


def quartile_thresholds(oriented_values) -> tuple:
    """Thresholds (min, Q1, Q2, Q3), giving four tiers (K = 3).

    Coincident quantiles are nudged apart so the thresholds stay strictly
    increasing.
    """
    v = np.asarray(oriented_values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise ValueError("no finite affinities to derive thresholds from")
    t = np.quantile(v, [0.0, 0.25, 0.5, 0.75])
    for i in range(1, len(t)):
        if t[i] <= t[i - 1]:
            t[i] = np.nextafter(t[i - 1], np.inf)
    return tuple(float(x) for x in t)


class ConeTerms(NamedTuple):
    radial: float
    angular: float
    combined: float


def _cone_quantities(pocket_points: LorentzPoint, ligand_points: LorentzPoint,
                     pair_assay, buckets, config: BucketConfig, kappa: float):
    pair_assay = np.asarray(pair_assay, dtype=np.int64)
    pockets = pocket_points[pair_assay]
    d = lorentz_distance(pockets, ligand_points, kappa)
    phi = exterior_angle(pockets, ligand_points, kappa)
    omega = half_aperture(pockets, config.aperture_r0, kappa)
    return d, phi, omega, config.radius_caps(buckets), config.angle_scales(buckets)


def cone_terms(pocket_points: LorentzPoint, ligand_points: LorentzPoint, pair_assay,
               buckets, config: BucketConfig, weights: LossWeights,
               kappa: float = 1.0) -> ConeTerms:
    """Radial and angular hinge penalties of the cone hierarchy.

    Parameters
    ----------
    pocket_points : LorentzPoint
        One embedded pocket per assay, shape ``(A,)``.
    ligand_points : LorentzPoint
        One embedded ligand per (assay, ligand) pair, shape ``(N,)``.
    pair_assay : array of int, shape (N,)
        Row of ``pocket_points`` that each pair belongs to.
    buckets : array of int, shape (N,)
        Affinity tier per pair.

    Returns
    -------
    ConeTerms
        ``radial``, ``angular`` and ``lambda_rad * radial + lambda_ang * angular``.
    """
    n = len(ligand_points)
    if n == 0:
        return ConeTerms(0.0, 0.0, 0.0)
    d, phi, omega, r, eta = _cone_quantities(pocket_points, ligand_points, pair_assay,
                                             buckets, config, kappa)
    radial = float(np.sum(np.maximum(d - r, 0.0)) / np.sqrt(n))
    angular = float(np.sum(np.maximum(phi - eta * omega, 0.0)) / np.sqrt(n))
    return ConeTerms(radial, angular,
                     weights.lambda_rad * radial + weights.lambda_ang_cone * angular)


cone_loss = cone_terms


def angular_margin_reg(pocket_points: LorentzPoint, ligand_points: LorentzPoint, pair_assay,
                       buckets, config: BucketConfig, margin: float,
                       kappa: float = 1.0) -> float:
    """Angular hinge pushed ``margin`` beyond the cone boundary."""
    n = len(ligand_points)
    if n == 0:
        return 0.0
    _, phi, omega, _, eta = _cone_quantities(pocket_points, ligand_points, pair_assay,
                                             buckets, config, kappa)
    return float(np.sum(np.maximum(phi - eta * omega + margin, 0.0)) / np.sqrt(n))


def heterogeneity_weights(affinities) -> np.ndarray:
    """DCG-style weights ``1 / log2(rank + 1)``, rank 1 = strongest (largest value).

    Ties keep input order.
    """
    a = np.asarray(affinities, dtype=np.float64)
    order = np.argsort(-a, kind="stable")
    rank = np.empty(a.size, dtype=np.int64)
    rank[order] = np.arange(1, a.size + 1)
    return 1.0 / np.log2(rank + 1.0)


def heterogeneity_reg(active_logits: Sequence, active_affinities: Sequence,
                      affinity_threshold: float) -> float:
    """Rank-weighted cross-entropy over each assay's active set.

    ``active_logits[i]`` and ``active_affinities[i]`` list the actives of
    assay ``i``.  Only actives with affinity below ``affinity_threshold``
    contribute; the sum is divided by the number of assays that have at
    least one active.
    """
    total, n_assays = 0.0, 0
    for logits, aff in zip(active_logits, active_affinities):
        logits = np.asarray(logits, dtype=np.float64)
        aff = np.asarray(aff, dtype=np.float64)
        if logits.size == 0:
            continue
        n_assays += 1
        chosen = aff < affinity_threshold
        if not np.any(chosen):
            continue
        log_p = _log_softmax(logits, axis=0)
        w = heterogeneity_weights(aff)
        total += float(-np.sum(w[chosen] * log_p[chosen]))
    return total / max(n_assays, 1)


def total_loss(terms: Mapping[str, Optional[float]], weights: LossWeights):
    """Weighted objective and its labelled breakdown.

    Missing sequence-tower terms (``None``) count as zero.  Returns
    ``(total, breakdown)`` where ``breakdown`` maps every name in
    ``TERM_NAMES`` to its raw (unweighted) value.
    """
    coef = weights.term_coefficients()
    breakdown = {}
    for name in TERM_NAMES:
        value = terms.get(name)
        value = 0.0 if value is None else float(value)
        if not np.isfinite(value):
            raise NonFiniteLossError(name, value)
        breakdown[name] = value
    total = 0.0
    for name in TERM_NAMES:
        if coef[name] != 0.0:
            total += coef[name] * breakdown[name]
    if not np.isfinite(total):
        raise NonFiniteLossError("total", total)
    return total, breakdown
