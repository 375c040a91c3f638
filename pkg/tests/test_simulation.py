"""Scenario generation, true curves and the study metrics."""

import math

import numpy as np
import pytest
from scipy import optimize, stats

from geoexpectile.laws import LawsConfig
from geoexpectile.mcmc import ChainConfig
from geoexpectile.simulation import (EstimatorSettings, ScenarioSpec, base_expectile,
                                     coverage, derive_seed, error_scale, generate_scenario,
                                     interval_widths, rmse, run_study, signal, true_curve)

FAST = EstimatorSettings(chain=ChainConfig(700, 200, 5, seed=0),
                         laws=LawsConfig(lambda_grid=np.logspace(-2, 3, 4), cv_folds=3))


def exp1_expectile(tau):
    return optimize.brentq(lambda e: tau * (math.exp(-e)) - (1 - tau) * (e - 1 + math.exp(-e)),
                           1e-9, 40, xtol=1e-15)


class TestScenarioSpec:
    def test_validation(self):
        with pytest.raises(ValueError, match="model"):
            ScenarioSpec("M4", "t2", 10)
        with pytest.raises(ValueError, match="not defined"):
            ScenarioSpec("M3", "t2", 10)
        with pytest.raises(ValueError, match="increasing"):
            ScenarioSpec("M1", "t2", 10, tau_list=(0.5, 0.2))
        with pytest.raises(ValueError):
            ScenarioSpec("M1", "t2", 10, replications=0)
        with pytest.raises(ValueError):
            ScenarioSpec("M1", "t2", 10, tau_list=(0.5, 1.0))


class TestSignals:
    def test_m1_at_origin(self):
        assert signal("M1", [0.0], [1.0])[0] == pytest.approx(7.0)

    def test_m2(self):
        assert signal("M2", [np.pi / 4], [0.0])[0] == pytest.approx(5.0)

    def test_m3_peak(self):
        assert signal("M3", [0.5])[0] == pytest.approx(2.0, abs=1e-15)

    def test_t2_median_level_shift_is_zero(self):
        z = np.linspace(0, 3, 7)
        np.testing.assert_allclose(true_curve("M1", "t2", 0.5, z, np.zeros(7)),
                                   signal("M1", z), atol=1e-10)

    def test_exponential_scaling(self):
        shift = true_curve("M1", "exponential-heteroscedastic", 0.5, [2.0], [0.0])[0] - \
            signal("M1", [2.0])[0]
        assert shift == pytest.approx(2.0, abs=1e-10)
        for tau in (0.1, 0.9):
            shift = true_curve("M1", "exponential-heteroscedastic", tau, [2.0], [0.0])[0] - \
                signal("M1", [2.0])[0]
            assert shift == pytest.approx(2.0 * exp1_expectile(tau), abs=1e-9)

    def test_error_a_variance(self):
        # error A is N(0, 0.5 z^2)
        assert error_scale("normal-heteroscedastic", 2.0) ** 2 == pytest.approx(2.0)

    def test_m3_scale(self):
        np.testing.assert_allclose(error_scale("M3-normal", [0.0, 0.5, 1.0]), [0.7, 0.2, 0.7])

    def test_monotone_in_tau(self):
        z = np.linspace(0, 1, 100)
        for err in ("M3-normal", "M3-exponential"):
            curves = [true_curve("M3", err, t, z) for t in (0.02, 0.1, 0.5, 0.9, 0.98)]
            assert np.all(np.diff(curves, axis=0) >= 0)

    def test_symmetric_errors_mirror(self):
        z = np.linspace(0, 3, 50)
        for err in ("normal-heteroscedastic", "t2"):
            lo = true_curve("M2", err, 0.1, z, np.ones(50))
            hi = true_curve("M2", err, 0.9, z, np.ones(50))
            np.testing.assert_allclose(lo + hi, 2 * signal("M2", z, np.ones(50)), atol=1e-8)

    def test_base_expectiles(self):
        assert base_expectile("normal", 0.5) == pytest.approx(0.0, abs=1e-12)
        assert base_expectile("exponential", 0.5) == pytest.approx(1.0, abs=1e-12)


class TestGenerateScenario:
    def test_shapes_and_truth(self):
        spec = ScenarioSpec("M1", "normal-heteroscedastic", 300, tau_list=(0.2, 0.8), seed=3)
        d = generate_scenario(spec, 0)
        assert d.y.shape == d.z.shape == d.x1.shape == (300,)
        assert set(d.truth) == {0.2, 0.8}
        assert np.all((0 <= d.z) & (d.z <= 3))
        assert set(np.unique(d.x1)) <= {0.0, 1.0}
        np.testing.assert_allclose(d.truth[0.8],
                                   true_curve("M1", "normal-heteroscedastic", 0.8, d.z, d.x1))

    def test_reproducible_and_distinct(self):
        spec = ScenarioSpec("M3", "M3-exponential", 50, seed=1)
        a, b, c = generate_scenario(spec, 0), generate_scenario(spec, 0), generate_scenario(spec, 1)
        np.testing.assert_array_equal(a.y, b.y)
        assert not np.array_equal(a.y, c.y)

    def test_error_distribution(self):
        spec = ScenarioSpec("M3", "M3-normal", 20000, seed=2)
        d = generate_scenario(spec, 0)
        eps = (d.y - signal("M3", d.z)) / error_scale("M3-normal", d.z)
        assert stats.kstest(eps, "norm").pvalue > 0.01
        assert d.x1 is None

    def test_derive_seed(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        assert derive_seed(1, 2) != derive_seed(2, 1)
        assert 0 <= derive_seed(5) < 2**63


class TestMetrics:
    def test_rmse(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert rmse([0.0, 0.0], [3.0, 4.0]) == 5.0
        with pytest.raises(ValueError):
            rmse([1.0], [1.0, 2.0])

    def test_rmse_invariances(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((2, 30))
        p = rng.permutation(30)
        assert rmse(a[p], b[p]) == pytest.approx(rmse(a, b), rel=1e-14)
        assert rmse(a + 7.0, b + 7.0) == pytest.approx(rmse(a, b), rel=1e-12)

    def test_coverage_infinite(self):
        lo = np.full((5, 4), -np.inf)
        np.testing.assert_array_equal(coverage(lo, -lo, np.zeros(4)), 1.0)

    def test_coverage_degenerate(self):
        est = np.ones((5, 4))
        np.testing.assert_array_equal(coverage(est, est, np.zeros(4)), 0.0)

    def test_coverage_constructed(self):
        truth = np.array([0.0, 1.0])
        lo = np.tile(truth - 1, (1000, 1))
        hi = np.tile(truth + 1, (1000, 1))
        lo[:50] += 5.0
        np.testing.assert_allclose(coverage(lo, hi, truth), 0.95)

    def test_widths(self):
        lo = np.zeros((3, 1))
        hi = np.array([[1.0], [3.0], [2.0]])
        mn, mx = interval_widths(lo, hi)
        assert (mn[0], mx[0]) == (1.0, 3.0)
        mn, mx = interval_widths(lo[:1], hi[:1])
        assert mn[0] == mx[0] == 1.0

    def test_widths_ordered(self):
        rng = np.random.default_rng(1)
        lo = rng.standard_normal((20, 10))
        hi = lo + rng.exponential(size=(20, 10))
        mn, mx = interval_widths(lo, hi)
        assert np.all(mn <= mx)


class TestRunStudy:
    def test_single_cell(self):
        spec = ScenarioSpec("M1", "normal-heteroscedastic", 60, 1, (0.5,), seed=4)
        rep = run_study(spec, ("laws",), FAST)
        assert len(rep.rmse_rows) == 1 and not rep.failures
        assert np.isfinite(rep.rmse_rows[0]["rmse"])

    def test_reproducible(self):
        spec = ScenarioSpec("M2", "t2", 60, 2, (0.2, 0.8), seed=5)
        a = run_study(spec, ("bayes", "laws"), FAST)
        b = run_study(spec, ("bayes", "laws"), FAST)
        assert a.rmse_rows == b.rmse_rows
        assert len(a.rmse_rows) == 2 * 2 * 2

    def test_interval_study(self):
        spec = ScenarioSpec("M3", "M3-normal", 80, 3, (0.5,), seed=6)
        rep = run_study(spec, ("bayes", "laws"), FAST, kind="interval")
        assert rep.grid.shape == (100,)
        assert rep.grid[0] == 0.0 and rep.grid[-1] == 1.0
        for method in ("bayes", "laws"):
            cov = rep.coverage[0.5, method]
            assert cov.shape == (100,) and np.all((0 <= cov) & (cov <= 1))
            assert np.all(rep.min_width[0.5, method] <= rep.max_width[0.5, method])
        assert len(rep.interval_rows()) == 200

    def test_failures_are_recorded(self):
        # a one-point grid with lambda = 0 makes the spline system singular for tiny n
        spec = ScenarioSpec("M3", "M3-normal", 5, 1, (0.5,), seed=7)
        settings = EstimatorSettings(laws=LawsConfig(lambda_grid=[0.0], cv_folds=2))
        rep = run_study(spec, ("laws",), settings)
        assert rep.failures and "error" in rep.failures[0]
        assert rep.rmse_rows == []

    def test_parallel_matches_serial(self):
        spec = ScenarioSpec("M1", "t2", 50, 2, (0.5,), seed=8)
        a = run_study(spec, ("laws",), FAST, jobs=1)
        b = run_study(spec, ("laws",), FAST, jobs=2)
        assert a.rmse_rows == b.rmse_rows

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            run_study(ScenarioSpec("M1", "t2", 10), ("boost",))
