"""Penalised IWLS backfitting, cross-validation and sandwich intervals."""

import math

import numpy as np
import pytest
from scipy import stats

from geoexpectile.distributions import asymmetric_weight
from geoexpectile.laws import (LawsConfig, SingularSystemError, asymptotic_ci, iwls_backfit,
                               laws_summary, select_lambda_cv)
from geoexpectile.terms import (AdjacencyGraph, SplineSpec, assemble_predictor, linear_term,
                                mrf_term, pspline_term)

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def loss_difference(y, a, b, tau):
    """L(a) - L(b) for the asymmetric squared loss, summed without cancellation."""
    wa = np.where(y > a, tau, 1.0 - tau)
    wb = np.where(y > b, tau, 1.0 - tau)
    same = wa == wb
    d = np.sum(wa[same] * (b - a) * (2.0 * y[same] - a - b))
    d += np.sum(wa[~same] * (y[~same] - a) ** 2 - wb[~same] * (y[~same] - b) ** 2)
    return d


def golden_expectile(y, tau, tol=1e-13):
    """Golden-section minimiser of the empirical asymmetric loss."""
    lo, hi = float(y.min()), float(y.max())
    c, d = hi - INV_PHI * (hi - lo), lo + INV_PHI * (hi - lo)
    while hi - lo > tol:
        if loss_difference(y, c, d, tau) < 0:
            hi, d = d, c
            c = hi - INV_PHI * (hi - lo)
        else:
            lo, c = c, d
            d = lo + INV_PHI * (hi - lo)
    return 0.5 * (lo + hi)


def stationarity(y, terms, fit):
    """Largest gradient entry of the penalised loss over all blocks."""
    r = (y - fit.eta) * asymmetric_weight(y, fit.eta, fit.tau)
    worst = abs(r.sum())
    for t, b, lam in zip(terms, fit.coefficients, fit.lambdas):
        g = t.design.T @ r - lam * (t.penalty @ b)
        worst = max(worst, np.abs(g).max())
    return worst


@pytest.fixture(scope="module")
def additive_data():
    rng = np.random.default_rng(42)
    n = 300
    z = rng.uniform(0, 3, n)
    x = rng.binomial(1, 0.5, n).astype(float)
    y = 2 * x + np.sin(2 * z) + rng.normal(0, 0.3 + 0.2 * z)
    terms = [linear_term("x", x), pspline_term("z", z, SplineSpec(inner_knots=10))]
    return y, terms


class TestIwlsBackfit:
    def test_ols_at_half(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((100, 3))
        y = 1.0 + X @ [0.5, -1.0, 2.0] + rng.standard_normal(100)
        fit = iwls_backfit(y, [linear_term("x", X)], 0.5)
        coef, *_ = np.linalg.lstsq(np.column_stack([np.ones(100), X]), y, rcond=None)
        assert abs(fit.intercept - coef[0]) < 1e-10
        np.testing.assert_allclose(fit.coefficients[0], coef[1:], atol=1e-10)
        assert fit.converged

    @pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
    def test_intercept_only(self, tau):
        y = np.random.default_rng(1).standard_normal(200)
        fit = iwls_backfit(y, [], tau)
        assert abs(fit.intercept - golden_expectile(y, tau)) < 1e-8

    @pytest.mark.parametrize("tau", [0.2, 0.5, 0.9])
    def test_stationarity(self, additive_data, tau):
        y, terms = additive_data
        fit = iwls_backfit(y, terms, tau, [3.0])
        assert fit.converged
        assert stationarity(y, terms, fit) < 1e-6

    def test_stationarity_with_mrf(self):
        rng = np.random.default_rng(2)
        labels = [f"r{i}" for i in range(6)]
        g = AdjacencyGraph(labels, {(labels[i], labels[i + 1]) for i in range(5)})
        regions = rng.choice(labels, 240)
        effect = {s: v for s, v in zip(labels, np.linspace(-1, 1, 6))}
        z = rng.uniform(0, 1, 240)
        y = np.array([effect[r] for r in regions]) + z ** 2 + rng.standard_normal(240) * 0.3
        terms = [pspline_term("z", z, SplineSpec(inner_knots=6)), mrf_term("s", regions, g)]
        fit = iwls_backfit(y, terms, 0.8, [1.0, 0.5])
        assert fit.converged
        assert stationarity(y, terms, fit) < 1e-6

    def test_predictor_consistency(self, additive_data):
        y, terms = additive_data
        fit = iwls_backfit(y, terms, 0.7, [1.0])
        eta = assemble_predictor(terms, fit.coefficients, fit.intercept)
        np.testing.assert_allclose(fit.eta, eta, atol=1e-10)

    def test_fixed_point(self, additive_data):
        y, terms = additive_data
        fit = iwls_backfit(y, terms, 0.9, [1.0])
        again = iwls_backfit(y, terms, 0.9, [1.0], init=fit)
        change = np.linalg.norm(again.eta - fit.eta) / np.linalg.norm(fit.eta)
        assert change < LawsConfig().convergence_tolerance

    def test_intercept_monotone_in_tau(self):
        y = np.random.default_rng(3).exponential(size=150)
        vals = [iwls_backfit(y, [], t).intercept for t in (0.05, 0.2, 0.5, 0.8, 0.95)]
        assert np.all(np.diff(vals) > 0)

    def test_shift_equivariance(self, additive_data):
        y, terms = additive_data
        a = iwls_backfit(y, terms, 0.3, [2.0])
        b = iwls_backfit(y + 10.0, terms, 0.3, [2.0])
        assert b.intercept - a.intercept == pytest.approx(10.0, abs=1e-8)
        for ca, cb in zip(a.coefficients, b.coefficients):
            np.testing.assert_allclose(ca, cb, atol=1e-8)

    def test_lambda_count(self, additive_data):
        y, terms = additive_data
        with pytest.raises(ValueError, match="lambdas"):
            iwls_backfit(y, terms, 0.5, [1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            iwls_backfit(y, terms, 0.5, [-1.0])

    def test_singular_system_names_term(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(100)
        y = rng.standard_normal(100)
        terms = [linear_term("x", x), linear_term("x_again", np.column_stack([x, 2 * x]))]
        with pytest.raises(SingularSystemError) as err:
            iwls_backfit(y, terms, 0.5)
        assert err.value.term == "x_again"
        assert "x_again" in str(err.value)

    def test_non_convergence_is_flagged(self, additive_data):
        y, terms = additive_data
        fit = iwls_backfit(y, terms, 0.9, [1.0], LawsConfig(max_backfit_iterations=1))
        assert not fit.converged and fit.iterations == 1


class TestSelectLambdaCv:
    def test_single_candidate(self, additive_data):
        y, terms = additive_data
        cv = select_lambda_cv(y, terms, 0.5, LawsConfig(lambda_grid=[7.0]))
        np.testing.assert_array_equal(cv.lambdas, [7.0])

    def test_minimum_of_exposed_scores(self, additive_data):
        y, terms = additive_data
        cv = select_lambda_cv(y, terms, 0.8, LawsConfig(lambda_grid=np.logspace(-3, 3, 7)))
        best = min(cv.scores, key=lambda s: s[1])
        np.testing.assert_array_equal(cv.lambdas, best[0])
        assert len(cv.scores) == 7

    def test_cartesian_grid_for_two_terms(self):
        rng = np.random.default_rng(5)
        z1, z2 = rng.uniform(size=(2, 120))
        y = np.sin(3 * z1) + rng.standard_normal(120) * 0.2
        terms = [pspline_term(n, v, SplineSpec(inner_knots=5)) for n, v in (("a", z1), ("b", z2))]
        cv = select_lambda_cv(y, terms, 0.5, LawsConfig(lambda_grid=[0.1, 10.0, 1000.0]))
        assert len(cv.scores) == 9

    def test_coordinate_search_for_three_terms(self):
        rng = np.random.default_rng(6)
        zs = rng.uniform(size=(3, 120))
        y = np.sin(3 * zs[0]) + rng.standard_normal(120) * 0.2
        terms = [pspline_term(f"z{k}", zs[k], SplineSpec(inner_knots=4)) for k in range(3)]
        cv = select_lambda_cv(y, terms, 0.5, LawsConfig(lambda_grid=[0.1, 10.0, 1000.0]))
        assert len(cv.scores) < 27
        assert cv.lambdas.shape == (3,)

    def test_deterministic(self, additive_data):
        y, terms = additive_data
        a = select_lambda_cv(y, terms, 0.2)
        b = select_lambda_cv(y, terms, 0.2)
        assert a.scores == b.scores

    @staticmethod
    def _noise_choice(seed, grid):
        rng = np.random.default_rng(1000 + seed)
        z = rng.uniform(0, 1, 100)
        y = rng.standard_normal(100)
        t = pspline_term("z", z, SplineSpec(inner_knots=10))
        cv = select_lambda_cv(y, [t], 0.5, LawsConfig(lambda_grid=grid, cv_seed=seed))
        return y, t, cv

    def test_matches_closed_form_cv_at_half(self):
        # at tau = 0.5 every fit is a penalised least-squares solve; W = 0.5 I
        # means the plain least-squares penalty is 2 * lambda
        grid = np.logspace(-4, 4, 10)
        for seed in range(5):
            y, t, cv = self._noise_choice(seed, grid)
            X = np.column_stack([np.ones(y.size), t.design])
            pen = np.zeros((X.shape[1], X.shape[1]))
            pen[1:, 1:] = t.penalty
            folds = np.array_split(np.random.Generator(np.random.Philox(seed)).permutation(y.size),
                                   5)
            scores = []
            for lam in grid:
                total = 0.0
                for test in folds:
                    train = np.setdiff1d(np.arange(y.size), test)
                    A = X[train].T @ X[train] + 2.0 * lam * pen
                    theta = np.linalg.solve(A, X[train].T @ y[train])
                    total += 0.5 * np.sum((y[test] - X[test] @ theta) ** 2)
                scores.append(total)
            replay = dict(cv.scores)
            np.testing.assert_allclose([replay[(lam,)] for lam in grid], scores, rtol=1e-7)
            assert cv.lambdas[0] == grid[int(np.argmin(scores))]

    @pytest.mark.slow
    def test_pure_noise_modal_choice_is_grid_maximum(self):
        grid = np.logspace(-4, 4, 10)
        picks = [self._noise_choice(seed, grid)[2].lambdas[0] for seed in range(50)]
        values, counts = np.unique(picks, return_counts=True)
        assert values[np.argmax(counts)] == grid[-1]
        assert np.mean(np.asarray(picks) >= grid[-3]) >= 0.7

    @pytest.mark.slow
    @pytest.mark.xfail(strict=True, reason="held-out-loss CV picks the grid maximum for pure "
                       "noise in about 60% of replications, not 80%")
    def test_pure_noise_grid_maximum_in_80_percent(self):
        grid = np.logspace(-4, 4, 10)
        picks = [self._noise_choice(seed, grid)[2].lambdas[0] for seed in range(50)]
        assert np.mean(np.asarray(picks) == grid[-1]) >= 0.8


class TestAsymptoticCi:
    def test_symmetric_bands(self, additive_data):
        y, terms = additive_data
        fit = iwls_backfit(y, terms, 0.5, [1.0])
        for band in asymptotic_ci(fit, y, terms, level=0.9).values():
            np.testing.assert_allclose(band.upper - band.estimate, band.estimate - band.lower,
                                       atol=1e-12)

    def test_grid_evaluation(self, additive_data):
        y, terms = additive_data
        fit = iwls_backfit(y, terms, 0.5, [1.0])
        grid = np.linspace(*terms[1].domain, 25)
        bands = asymptotic_ci(fit, y, terms, points={"z": grid}, include_intercept=True)
        expected = terms[1].evaluate(grid) @ fit.coefficients[1] + fit.intercept
        np.testing.assert_allclose(bands["z"].estimate, expected, atol=1e-12)
        assert bands["z"].estimate.shape == (25,)

    def test_summary_effects(self, additive_data):
        y, terms = additive_data
        fit = iwls_backfit(y, terms, 0.5, [1.0])
        res = laws_summary(fit, y, terms, grids={"z": np.linspace(*terms[1].domain, 10)})
        band = res.effects["x"]
        assert band.lower[0] < fit.coefficients[0][0] < band.upper[0]
        assert res.curves["z"].band.width.shape == (10,)

    @staticmethod
    def _line_bands(n, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, n)
        y = 1.0 + 2.0 * x + rng.standard_normal(n)
        t = linear_term("x", x)
        fit = iwls_backfit(y, [t], 0.5)
        grid = np.linspace(-1, 1, 11)
        band = asymptotic_ci(fit, y, [t], points={"x": grid}, include_intercept=True)["x"]
        return band, 1.0 + 2.0 * grid

    def test_coverage_of_true_line(self):
        hits = []
        for seed in range(200):
            band, truth = self._line_bands(2000, seed)
            hits.append(band.contains(truth))
        cov = np.mean(hits)
        assert 0.92 <= cov <= 0.98

    def test_width_scales_with_root_n(self):
        ratios = []
        for seed in range(20):
            wide, _ = self._line_bands(500, seed)
            narrow, _ = self._line_bands(2000, seed)
            ratios.append(np.mean(narrow.width) / np.mean(wide.width))
        assert 0.4 <= np.median(ratios) <= 0.6

    def test_normal_quantile(self):
        y = np.random.default_rng(7).standard_normal(50)
        fit = iwls_backfit(y, [], 0.5)
        res = laws_summary(fit, y, [], level=0.95, include_intercept=True)
        se = math.sqrt(np.sum(0.25 * (y - y.mean()) ** 2)) / (0.5 * 50)
        half = res.intercept.upper[0] - res.intercept.estimate[0]
        assert half == pytest.approx(stats.norm.ppf(0.975) * se, rel=1e-10)
