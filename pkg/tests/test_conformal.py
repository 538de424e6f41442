import math
from fractions import Fraction

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from carmnav.conformal import (CalibrationTable, ConformalCalibrator, calibrate,
                               conformal_quantile_rank, contains,
                               min_calibration_size, nonconformity_score,
                               prediction_region)

ALPHAS = (0.1, 0.05, 0.03)


def oracle_quantile(scores, alpha):
    """Brute-force sort-and-rank oracle: smallest k with k/(n+1) >= 1-alpha."""
    ordered = sorted(scores)
    n = len(ordered)
    for k in range(1, n + 1):
        if Fraction(k, n + 1) >= 1 - Fraction(alpha):
            return ordered[k - 1]
    return math.inf


def table_for(scores, alphas=ALPHAS, **kwargs):
    return calibrate([np.asarray(scores)] * 14, alphas, **kwargs)


class TestScore:
    def test_unit_variance_is_raw_distance(self):
        rng = np.random.default_rng(0)
        pred = rng.normal(size=(10, 3))
        true = rng.normal(size=(10, 3))
        scores = nonconformity_score(pred, true, np.ones(10))
        assert np.array_equal(scores, np.linalg.norm(pred - true, axis=-1))

    def test_perfect_prediction_scores_zero(self):
        point = np.array([0.3, -0.2, 0.9])
        assert nonconformity_score(point, point, 17.0) == 0.0

    def test_hand_value(self):
        score = nonconformity_score([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], 2.0)
        assert score == 0.5

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            nonconformity_score([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], 0.0)


class TestQuantileRank:
    def test_matches_oracle_for_all_small_n(self):
        # exhaustive oracle equivalence, n = 1..100, all alphas,
        # including the +inf sentinel cases
        rng = np.random.default_rng(1)
        for n in range(1, 101):
            scores = rng.exponential(size=n)
            table = table_for(scores)
            for j, alpha in enumerate(ALPHAS):
                expected = oracle_quantile(scores, alpha)
                got = table.quantiles[0, j]
                assert got == expected, (n, alpha)

    def test_rank_avoids_float_rounding(self):
        # (9+1) * (1-0.1) must rank 9, not 10
        assert conformal_quantile_rank(9, 0.1) == 9
        assert conformal_quantile_rank(19, 0.05) == 19

    def test_n9_alpha01_is_maximum_score(self):
        scores = np.array([5.0, 1.0, 3.0, 9.0, 2.0, 8.0, 7.0, 4.0, 6.0])
        table = table_for(scores, alphas=(0.1,))
        assert table.quantiles[0, 0] == 9.0

    def test_constant_scores_give_constant_quantiles(self):
        table = table_for(np.full(40, 3.25))
        finite = np.isfinite(table.quantiles)
        assert np.all(table.quantiles[finite] == 3.25)

    def test_quantiles_nondecreasing_as_alpha_shrinks(self):
        rng = np.random.default_rng(2)
        table = table_for(rng.exponential(size=200))
        # columns are ordered by shrinking alpha (rising confidence)
        assert np.all(np.diff(table.quantiles, axis=1) >= 0)

    def test_infinite_sentinel_for_small_n(self):
        table = table_for(np.array([1.0, 2.0]), alphas=(0.03,))
        assert np.isinf(table.quantiles).all()

    def test_require_finite_reports_needed_n(self):
        with pytest.raises(ValueError, match="33"):
            table_for(np.arange(5.0), alphas=(0.03,), require_finite=True)

    def test_min_calibration_size(self):
        assert min_calibration_size(0.03) == 33
        assert min_calibration_size(0.1) == 9
        for alpha in ALPHAS:
            n = min_calibration_size(alpha)
            assert conformal_quantile_rank(n, alpha) <= n
            assert conformal_quantile_rank(n - 1, alpha) > n - 1

    def test_rejects_negative_or_nonfinite_scores(self):
        with pytest.raises(ValueError):
            table_for(np.array([1.0, -0.5]))
        with pytest.raises(ValueError):
            table_for(np.array([1.0, np.inf]))


class TestRegions:
    def test_radius_is_variance_times_quantile(self):
        region = prediction_region(np.zeros(3), 2.0, 3.0)
        assert region.radius == 6.0

    def test_zero_quantile_degenerates_to_point(self):
        region = prediction_region(np.array([0.1, 0.2, 0.3]), 1.0, 0.0)
        assert contains(region, [0.1, 0.2, 0.3])
        assert not contains(region, [0.1, 0.2, 0.3 + 1e-12])

    def test_boundary_point_is_contained(self):
        # closed inequality: distance exactly equal to the radius counts
        region = prediction_region(np.zeros(3), 0.5, 4.0)
        assert region.radius == 2.0
        assert contains(region, [2.0, 0.0, 0.0])
        assert not contains(region, [2.0 + 1e-12, 0.0, 0.0])

    def test_center_always_contained(self):
        region = prediction_region(np.ones(3), 1.0, 0.0)
        assert contains(region, np.ones(3))

    def test_infinite_quantile_covers_everything(self):
        region = prediction_region(np.zeros(3), 1.0, np.inf)
        assert contains(region, [1e9, -1e9, 1e9])

    def test_rejects_invalid_inputs(self):
        with pytest.raises(ValueError):
            prediction_region(np.zeros(3), 0.0, 1.0)
        with pytest.raises(ValueError):
            prediction_region(np.zeros(3), 1.0, -1.0)


class TestScaleEquivariance:
    def test_global_variance_rescale_preserves_decisions(self):
        rng = np.random.default_rng(3)
        n_cal, n_test = 300, 200
        cal_pred = rng.normal(size=(n_cal, 14, 3))
        cal_true = cal_pred + rng.normal(size=(n_cal, 14, 3)) * 0.3
        cal_sig = rng.uniform(0.5, 2.0, size=(n_cal, 14))
        test_pred = rng.normal(size=(n_test, 14, 3))
        test_true = test_pred + rng.normal(size=(n_test, 14, 3)) * 0.3
        test_sig = rng.uniform(0.5, 2.0, size=(n_test, 14))

        base = ConformalCalibrator(ALPHAS).fit(cal_pred, cal_sig, cal_true)
        doubled = ConformalCalibrator(ALPHAS).fit(cal_pred, 2.0 * cal_sig, cal_true)
        # scores halve, quantiles halve, radii cancel exactly
        assert np.array_equal(doubled.table_.quantiles, base.table_.quantiles / 2.0)
        for alpha in ALPHAS:
            a = base.covers(test_pred, test_sig, test_true, alpha)
            b = doubled.covers(test_pred, 2.0 * test_sig, test_true, alpha)
            assert np.array_equal(a, b)


class TestMarginalCoverage:
    def test_coverage_on_exchangeable_scores(self):
        # the headline guarantee: frequencies land at 1 - alpha up to
        # binomial noise, and never collapse below it
        rng = np.random.default_rng(4)
        n_cal, n_test = 1000, 20_000
        cal_scores = np.abs(rng.normal(size=(n_cal, 14)))
        test_scores = np.abs(rng.normal(size=(n_test, 14)))
        table = calibrate([cal_scores[:, k] for k in range(14)], ALPHAS)
        for j, alpha in enumerate(ALPHAS):
            covered = test_scores <= table.quantiles[None, :, j]
            coverage = covered.mean()
            noise = 4.0 * np.sqrt(alpha * (1 - alpha) / n_test)
            assert coverage >= (1 - alpha) - noise
            assert coverage <= (1 - alpha) + 1.0 / (n_cal + 1) + noise


class TestTableSerialization:
    def test_json_round_trip_with_sentinels(self, tmp_path):
        rng = np.random.default_rng(5)
        table = table_for(rng.exponential(size=9))   # alpha=0.03 -> inf
        assert np.isinf(table.quantiles[:, 2]).all()
        path = tmp_path / "table.json"
        table.save(path)
        restored = CalibrationTable.load(path)
        assert restored.alphas == table.alphas
        assert np.array_equal(restored.quantiles, table.quantiles)
        assert np.array_equal(restored.n_per_landmark, table.n_per_landmark)
        assert restored.score_version == table.score_version

    def test_quantile_lookup(self):
        table = table_for(np.arange(1.0, 101.0))
        assert table.quantile(1, 0.1) == table.quantiles[0, 0]
        with pytest.raises(KeyError):
            table.quantile(1, 0.5)


class TestEstimatorApi:
    def test_fit_covers_shapes(self):
        rng = np.random.default_rng(6)
        pred = rng.normal(size=(120, 14, 3))
        true = pred + 0.1 * rng.normal(size=(120, 14, 3))
        sig = rng.uniform(0.5, 1.5, size=(120, 14))
        cal = ConformalCalibrator(ALPHAS).fit(pred, sig, true)
        covered = cal.covers(pred, sig, true, 0.1)
        assert covered.shape == (120, 14)
        assert covered.mean() > 0.8

    def test_unfitted_rejected(self):
        with pytest.raises(NotFittedError):
            ConformalCalibrator().radii(np.ones((2, 14)), 0.1)

    def test_get_params_clone(self):
        cal = ConformalCalibrator(alphas=(0.2, 0.1))
        assert clone(cal).get_params() == cal.get_params()
