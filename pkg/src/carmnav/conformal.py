"""Split conformal calibration with uncertainty-scaled prediction regions.

The nonconformity score of a sample is the Euclidean distance between
predicted and true displacement divided by the predicted total variance.
Calibration extracts, per landmark and per significance level alpha, the
finite-sample quantile of those scores: the ceil((n+1)(1-alpha))-th
smallest, the standard split-conformal construction whose rank-statistic
argument gives marginal coverage >= 1-alpha for exchangeable data.  When
the rank exceeds n the quantile is +inf and the region covers everything.

Test-time regions are closed balls around the predicted displacement
with radius sigma2_total * Q, so a twitchy prediction buys itself a
proportionally larger region.  Because the same sigma2_total divides the
score and multiplies the radius, containment decisions are invariant to
a global positive rescaling of the uncertainties.
"""

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .anatomy import N_LANDMARKS
from .validation import check_positive

DEFAULT_ALPHAS = (0.1, 0.05, 0.03)
SCORE_VERSION = "euclidean-over-total-variance/1"


def nonconformity_score(pred_displacement, true_displacement, sigma2_total):
    """Euclidean error scaled by the predicted total variance.

    Accepts single 3-vectors or stacked (..., 3) arrays with matching
    (...,) variances. Variances must be strictly positive.
    """
    pred = np.asarray(pred_displacement, dtype=np.float64)
    true = np.asarray(true_displacement, dtype=np.float64)
    sigma2 = np.asarray(sigma2_total, dtype=np.float64)
    if np.any(sigma2 <= 0.0):
        raise ValueError("sigma2_total must be strictly positive")
    distance = np.linalg.norm(pred - true, axis=-1)
    score = distance / sigma2
    return float(score) if score.ndim == 0 else score


def conformal_quantile_rank(n, alpha):
    """ceil((n+1)(1-alpha)), evaluated in exact rational arithmetic.

    Float evaluation can round (n+1)(1-alpha) across an integer
    boundary and silently shift the rank by one.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return math.ceil(Fraction(n + 1) * (1 - Fraction(alpha)))


def min_calibration_size(alpha):
    """Smallest n for which the quantile rank stays finite (rank <= n)."""
    n = math.ceil((1 - Fraction(alpha)) / Fraction(alpha))
    while conformal_quantile_rank(n, alpha) > n:   # guard rational edge cases
        n += 1
    return n


@dataclass(frozen=True)
class CalibrationTable:
    """Per-landmark, per-alpha conformal quantiles."""

    alphas: tuple
    quantiles: np.ndarray          # (14, n_alphas), +inf where unbounded
    n_per_landmark: np.ndarray     # (14,) calibration set sizes
    score_version: str = SCORE_VERSION

    def quantile(self, landmark, alpha):
        """Quantile for a 1-based landmark index at one alpha."""
        try:
            col = self.alphas.index(alpha)
        except ValueError:
            raise KeyError(f"alpha {alpha} not in calibrated set {self.alphas}") from None
        return float(self.quantiles[landmark - 1, col])

    def to_json(self):
        return {
            "score_version": self.score_version,
            "alphas": list(self.alphas),
            "n": {str(k + 1): int(self.n_per_landmark[k]) for k in range(N_LANDMARKS)},
            "landmarks": {
                str(k + 1): {
                    repr(a): (None if math.isinf(self.quantiles[k, j]) else self.quantiles[k, j])
                    for j, a in enumerate(self.alphas)
                }
                for k in range(N_LANDMARKS)
            },
        }

    @classmethod
    def from_json(cls, doc):
        alphas = tuple(doc["alphas"])
        quantiles = np.empty((N_LANDMARKS, len(alphas)))
        for k in range(N_LANDMARKS):
            row = doc["landmarks"][str(k + 1)]
            for j, a in enumerate(alphas):
                value = row[repr(a)]
                quantiles[k, j] = np.inf if value is None else float(value)
        n = np.array([doc["n"][str(k + 1)] for k in range(N_LANDMARKS)], dtype=np.int64)
        return cls(alphas=alphas, quantiles=quantiles, n_per_landmark=n,
                   score_version=doc.get("score_version", SCORE_VERSION))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def calibrate(scores_by_landmark, alphas=DEFAULT_ALPHAS, require_finite=False):
    """Build the quantile table from per-landmark score lists.

    ``scores_by_landmark`` is a sequence of 14 score arrays or an
    (n, 14) matrix. With ``require_finite`` the calibration set must be
    large enough that no quantile degenerates to +inf.
    """
    alphas = tuple(float(a) for a in alphas)
    if not alphas:
        raise ValueError("need at least one alpha")
    if isinstance(scores_by_landmark, np.ndarray) and scores_by_landmark.ndim == 2:
        per_landmark = [scores_by_landmark[:, k] for k in range(scores_by_landmark.shape[1])]
    else:
        per_landmark = [np.asarray(s, dtype=np.float64) for s in scores_by_landmark]
    if len(per_landmark) != N_LANDMARKS:
        raise ValueError(f"expected {N_LANDMARKS} score lists, got {len(per_landmark)}")

    if require_finite:
        needed = max(min_calibration_size(a) for a in alphas)
        short = [k + 1 for k, s in enumerate(per_landmark) if len(s) < needed]
        if short:
            raise ValueError(
                f"insufficient calibration scores for landmarks {short}: "
                f"min alpha {min(alphas)} requires n >= {needed}"
            )

    quantiles = np.empty((N_LANDMARKS, len(alphas)))
    sizes = np.empty(N_LANDMARKS, dtype=np.int64)
    for k, scores in enumerate(per_landmark):
        scores = np.asarray(scores, dtype=np.float64)
        if scores.size == 0:
            raise ValueError(f"landmark {k + 1} has no calibration scores")
        if np.any(scores < 0) or not np.all(np.isfinite(scores)):
            raise ValueError(f"landmark {k + 1}: scores must be finite and nonnegative")
        ordered = np.sort(scores)
        n = ordered.size
        sizes[k] = n
        for j, alpha in enumerate(alphas):
            rank = conformal_quantile_rank(n, alpha)
            quantiles[k, j] = ordered[rank - 1] if rank <= n else np.inf

    return CalibrationTable(alphas=alphas, quantiles=quantiles, n_per_landmark=sizes)


@dataclass(frozen=True)
class PredictionRegion:
    """Closed ball around a predicted displacement."""

    center: np.ndarray
    radius: float


def prediction_region(pred_displacement, sigma2_total, quantile):
    """Region whose radius scales with the predicted uncertainty."""
    sigma2 = check_positive(sigma2_total, "sigma2_total")
    if quantile < 0:
        raise ValueError("quantile must be nonnegative")
    center = np.asarray(pred_displacement, dtype=np.float64)
    return PredictionRegion(center=center, radius=sigma2 * quantile)


def contains(region, point):
    """Closed-ball membership: distance <= radius."""
    distance = float(np.linalg.norm(np.asarray(point, dtype=np.float64) - region.center))
    return distance <= region.radius


class ConformalCalibrator(BaseEstimator):
    """Estimator-style wrapper: fit on calibration predictions, then emit
    per-sample region radii and containment decisions on test data."""

    def __init__(self, alphas=DEFAULT_ALPHAS):
        self.alphas = alphas

    def fit(self, pred_displacements, sigma2_totals, true_displacements):
        """Score an (n, 14, 3) calibration batch and build the table."""
        scores = nonconformity_score(pred_displacements, true_displacements, sigma2_totals)
        if scores.ndim != 2 or scores.shape[1] != N_LANDMARKS:
            raise ValueError(f"expected (n, {N_LANDMARKS}) scores, got {scores.shape}")
        self.table_ = calibrate(
            [scores[:, k] for k in range(N_LANDMARKS)], tuple(self.alphas)
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "table_"):
            raise NotFittedError("ConformalCalibrator is not fitted")

    def radii(self, sigma2_totals, alpha):
        """Region radii for an (n, 14) variance matrix at one alpha."""
        self._check_fitted()
        col = self.table_.alphas.index(float(alpha))
        sigma2 = np.asarray(sigma2_totals, dtype=np.float64)
        return sigma2 * self.table_.quantiles[None, :, col]

    def covers(self, pred_displacements, sigma2_totals, true_displacements, alpha):
        """Boolean (n, 14): does each region contain its true displacement."""
        pred = np.asarray(pred_displacements, dtype=np.float64)
        true = np.asarray(true_displacements, dtype=np.float64)
        distance = np.linalg.norm(pred - true, axis=-1)
        return distance <= self.radii(sigma2_totals, alpha)
