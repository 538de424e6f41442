"""Evaluation metrics and report emission.

Distances are computed in normalized units and reported alongside a
nominal millimetre value (units * 1800, the body-extent convention).
The mm figures are labeled nominal because the simulator has no true
physical scale.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .anatomy import LANDMARK_NAMES, N_LANDMARKS, units_to_mm
from .losses import nll_loss


def mean_euclidean_distance(predicted, truth):
    """Mean distance between predictions and ground truth.

    Inputs are (n, 14, 3); positions and displacements give identical
    results since both sides share the pose offset. Returns the overall
    mean and the per-landmark means (14,).
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape or predicted.ndim != 3:
        raise ValueError("expected matching (n, m, 3) arrays")
    if predicted.shape[0] == 0:
        raise ValueError("empty input")
    distances = np.linalg.norm(predicted - truth, axis=2)
    return float(distances.mean()), distances.mean(axis=0)


def eval_nll(mean, variance, targets):
    """Mean Gaussian NLL with beta = 1, the evaluation convention."""
    value, _, _ = nll_loss(mean, variance, targets, beta=1.0)
    return value


def per_landmark_nll(mean, variance, targets):
    return np.array([
        nll_loss(mean[:, k], variance[:, k], targets[:, k], beta=1.0)[0]
        for k in range(mean.shape[1])
    ])


def prcp(pred_displacements, radii, true_displacements):
    """Prediction-region coverage: fraction of (sample, landmark) pairs
    whose true displacement falls inside its closed ball.

    Returns the overall fraction and the per-landmark fractions (14,).
    """
    pred = np.asarray(pred_displacements, dtype=np.float64)
    true = np.asarray(true_displacements, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    if pred.shape != true.shape or pred.shape[:2] != radii.shape:
        raise ValueError("prediction, truth, and radii arities do not match")
    inside = np.linalg.norm(pred - true, axis=2) <= radii
    return float(inside.mean()), inside.mean(axis=0)


@dataclass
class MetricsReport:
    """Overall and per-landmark metrics in the layout of the result tables."""

    n_samples: int
    mean_distance_units: float
    per_landmark_distance_units: np.ndarray
    nll_calibration: float
    nll_test: float
    per_landmark_nll: np.ndarray
    coverage: dict = field(default_factory=dict)  # alpha -> {overall, per_landmark}

    @property
    def mean_distance_mm(self):
        return float(units_to_mm(self.mean_distance_units))

    @property
    def per_landmark_distance_mm(self):
        return units_to_mm(self.per_landmark_distance_units)

    def to_json(self):
        return {
            "n_samples": self.n_samples,
            "mean_distance_units": self.mean_distance_units,
            "mean_distance_mm_nominal": self.mean_distance_mm,
            "per_landmark_distance_units": self.per_landmark_distance_units.tolist(),
            "per_landmark_distance_mm_nominal": self.per_landmark_distance_mm.tolist(),
            "nll_calibration": self.nll_calibration,
            "nll_test": self.nll_test,
            "per_landmark_nll": self.per_landmark_nll.tolist(),
            "prcp": {
                repr(alpha): {
                    "overall": cov["overall"],
                    "per_landmark": np.asarray(cov["per_landmark"]).tolist(),
                }
                for alpha, cov in self.coverage.items()
            },
        }


def _coverage_columns(alphas):
    return [f"prcp@{round((1 - a) * 100)}" for a in alphas]


def write_report_csv(report, path):
    """One row per landmark plus an overall row; coverage columns are
    labeled by confidence level (prcp@90 etc.)."""
    alphas = sorted(report.coverage, reverse=True)
    headers = ["landmark", "distance_mm", "nll"] + _coverage_columns(alphas)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        mm = report.per_landmark_distance_mm
        for k in range(N_LANDMARKS):
            row = [f"{k + 1}: {LANDMARK_NAMES[k]}", repr(float(mm[k])),
                   repr(float(report.per_landmark_nll[k]))]
            row += [repr(float(report.coverage[a]["per_landmark"][k])) for a in alphas]
            writer.writerow(row)
        overall = ["overall", repr(report.mean_distance_mm), repr(report.nll_test)]
        overall += [repr(float(report.coverage[a]["overall"])) for a in alphas]
        writer.writerow(overall)


def write_report_json(report, path):
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, sort_keys=True, indent=2)
        fh.write("\n")
