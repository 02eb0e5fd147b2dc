"""Statistical kernel: worked examples plus independent brute-force oracles."""

import math

import numpy as np
import pytest

from loopgrid import statkit
from loopgrid.statkit import (
    DegenerateDesign,
    EmptyInput,
    NotNormalized,
    RankTooLarge,
    SingularConditioningBlock,
    TooFewDays,
    TooFewPoints,
    conditional_expectation,
    entropy,
    fit_truncated_gaussian,
    gaussian_weight,
    loess_fit,
    percentile,
    wls_fit,
)

RNG = np.random.default_rng(1234)


def brute_loess(x, y, span, degree, eval_x):
    """Reference local regression: explicit weighted polynomial solve per point."""
    n = x.size
    q = max(degree + 1, int(math.ceil(span * n)))
    out = []
    for x0 in eval_x:
        d = np.abs(x - x0)
        h = np.sort(d)[q - 1]
        w = np.where(d < h, (1 - (d / np.maximum(h, 1e-300)) ** 3) ** 3, 0.0)
        if h == 0:
            out.append(y[d == 0].mean())
            continue
        design = np.vstack([(x - x0) ** p for p in range(degree + 1)]).T
        wd = design * w[:, None]
        coef = np.linalg.solve(design.T @ wd, wd.T @ y)
        out.append(coef[0])
    return np.asarray(out)


class TestLoess:
    def test_linear_data_reproduced_exactly(self):
        x = np.linspace(0, 10, 50)
        y = 2 * x + 1
        fit = loess_fit(x, y, span=0.4, degree=1, eval_x=x)
        assert np.max(np.abs(fit.fitted - y)) < 1e-9

    def test_constant_data(self):
        x = np.arange(12.0)
        fit = loess_fit(x, np.full(12, 3.25), span=0.5, degree=1)
        assert np.allclose(fit.fitted, 3.25)

    def test_matches_bruteforce_on_noisy_sine(self):
        x = np.sort(RNG.uniform(0, 2 * np.pi, 20))
        y = np.sin(x) + RNG.normal(0, 0.1, 20)
        eval_x = np.linspace(0.2, 6.0, 15)
        fit = loess_fit(x, y, span=0.5, degree=1, eval_x=eval_x)
        ref = brute_loess(x, y, 0.5, 1, eval_x)
        assert np.max(np.abs(fit.fitted - ref)) < 1e-8

    def test_extrapolates_beyond_data_range(self):
        x = np.linspace(0, 5, 30)
        y = 3 * x - 2
        fit = loess_fit(x, y, span=0.5, degree=1, eval_x=np.array([7.0, 9.0]))
        assert np.allclose(fit.fitted, 3 * np.array([7.0, 9.0]) - 2, atol=1e-8)

    def test_quadratic_exact_at_degree_two(self):
        x = np.linspace(-2, 2, 40)
        y = x**2 - x + 0.5
        fit = loess_fit(x, y, span=0.5, degree=2, eval_x=x[5:35])
        assert np.max(np.abs(fit.fitted - y[5:35])) < 1e-8

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            loess_fit([1.0], [2.0], degree=1)

    def test_degenerate_window(self):
        x = np.zeros(10)
        with pytest.raises(DegenerateDesign):
            loess_fit(x, np.arange(10.0), span=1.0, degree=1, eval_x=np.array([0.0]))


class TestWls:
    def test_exact_line_any_weights(self):
        x = np.arange(10.0)
        y = 3 * x - 2
        w = RNG.uniform(0.5, 2.0, 10)
        a, b = wls_fit(x, y, w)
        assert abs(a + 2) < 1e-12 and abs(b - 3) < 1e-12

    def test_two_point_interpolation(self):
        a, b = wls_fit([0.0, 1.0], [1.0, 3.0], [1.0, 1.0])
        assert abs(a - 1) < 1e-12 and abs(b - 2) < 1e-12

    def test_matches_normal_equation_oracle(self):
        x = RNG.uniform(-5, 5, 5)
        y = RNG.uniform(-5, 5, 5)
        w = RNG.uniform(0.1, 3.0, 5)
        a, b = wls_fit(x, y, w)
        design = np.vstack([np.ones(5), x]).T
        ref = np.linalg.solve(design.T @ (design * w[:, None]), design.T @ (w * y))
        assert abs(a - ref[0]) < 1e-12 and abs(b - ref[1]) < 1e-12

    def test_residuals_weight_orthogonal(self):
        for _ in range(25):
            n = RNG.integers(3, 40)
            x = RNG.normal(0, 3, n)
            if np.unique(x).size < 2:
                continue
            y = RNG.normal(0, 5, n)
            w = RNG.uniform(0.01, 2.0, n)
            a, b = wls_fit(x, y, w)
            r = y - a - b * x
            scale = np.abs(w * y).sum() + 1.0
            assert abs(np.dot(w, r)) < 1e-9 * scale
            assert abs(np.dot(w, r * x)) < 1e-9 * scale * (np.abs(x).max() + 1)

    def test_degenerate(self):
        with pytest.raises(DegenerateDesign):
            wls_fit([2.0, 2.0, 2.0], [1.0, 2.0, 3.0], [1.0, 1.0, 1.0])


class TestPercentile:
    def test_sixty_of_one_to_ten(self):
        assert abs(percentile(range(1, 11), 0.6) - 6.4) < 1e-12

    def test_ends(self):
        vals = RNG.uniform(-10, 10, 17)
        assert percentile(vals, 0.0) == vals.min()
        assert percentile(vals, 1.0) == vals.max()

    def test_monotone_in_p(self):
        vals = RNG.normal(0, 1, 31)
        ps = np.linspace(0, 1, 21)
        qs = [percentile(vals, p) for p in ps]
        assert all(q2 >= q1 - 1e-12 for q1, q2 in zip(qs, qs[1:]))

    def test_affine_equivariance(self):
        vals = RNG.normal(0, 1, 25)
        for p in (0.1, 0.42, 0.6, 0.93):
            q = percentile(vals, p)
            assert abs(percentile(3.5 * vals - 2.0, p) - (3.5 * q - 2.0)) < 1e-9

    def test_empty(self):
        with pytest.raises(EmptyInput):
            percentile([], 0.5)

    def test_matches_numpy_linear(self):
        vals = RNG.uniform(0, 1, 40)
        for p in (0.25, 0.6, 0.835):
            assert abs(percentile(vals, p) - np.percentile(vals, 100 * p)) < 1e-12


class TestEntropy:
    def test_single_bin_is_zero(self):
        assert entropy([1.0]) == 0.0
        assert entropy([0.0, 1.0, 0.0]) == 0.0

    def test_uniform_two_bins(self):
        assert abs(entropy([0.5, 0.5]) - math.log(2)) < 1e-12

    def test_quarter_three_quarters(self):
        assert abs(entropy([0.25, 0.75]) - 0.5623351446188083) < 1e-10

    def test_direct_summation_oracle(self):
        p = RNG.dirichlet(np.ones(12))
        ref = -sum(pi * math.log(pi) for pi in p if pi > 0)
        assert abs(entropy(p) - ref) < 1e-12

    def test_nonnegative_and_zero_iff_point_mass(self):
        for _ in range(20):
            p = RNG.dirichlet(np.ones(RNG.integers(1, 9)))
            h = entropy(p)
            assert h >= 0.0
            if h == 0.0:
                assert np.count_nonzero(p > 0) == 1

    def test_not_normalized(self):
        with pytest.raises(NotNormalized):
            entropy([0.5, 0.4])
        with pytest.raises(NotNormalized):
            entropy([-0.1, 1.1])


class TestGaussianWeight:
    def test_peak_value(self):
        assert abs(gaussian_weight(0.0, 10.0) - 0.03989422804014327) < 1e-12

    def test_one_sigma(self):
        peak = gaussian_weight(0.0, 3.0)
        assert abs(gaussian_weight(3.0, 3.0) - peak * math.exp(-0.5)) < 1e-15

    def test_far_tail_vanishes(self):
        assert gaussian_weight(1e6, 1.0) == 0.0


class TestTruncatedGaussian:
    def test_full_rank_reconstruction(self):
        x = RNG.normal(0, 1, (30, 5)) @ RNG.normal(0, 1, (5, 5))
        model = fit_truncated_gaussian(x, r=5, ridge=0.0)
        emp = np.cov(x, rowvar=False)
        assert np.max(np.abs(model.covariance() - emp)) < 1e-9

    def test_identical_vectors(self):
        x = np.tile([1.0, 2.0, 3.0], (4, 1))
        model = fit_truncated_gaussian(x, r=3, ridge=0.0)
        assert np.allclose(model.eigenvalues, 0.0)
        assert np.allclose(model.mean, [1.0, 2.0, 3.0])

    def test_one_factor_structure(self):
        loading = np.array([1.0, -2.0, 0.5])
        factor = RNG.normal(0, 3.0, 200)
        x = 5.0 + factor[:, None] * loading[None, :] + RNG.normal(0, 1e-4, (200, 3))
        model = fit_truncated_gaussian(x, r=1, ridge=0.0)
        emp = np.cov(x, rowvar=False)
        assert model.eigenvalues[0] / np.trace(emp) >= 0.99

    def test_rank_errors(self):
        x = RNG.normal(0, 1, (5, 3))
        with pytest.raises(RankTooLarge):
            fit_truncated_gaussian(x, r=4)
        with pytest.raises(TooFewDays):
            fit_truncated_gaussian(x[:1], r=1)


class TestConditionalExpectation:
    def _model(self, mean, cov, ridge=0.0):
        vals, vecs = np.linalg.eigh(np.asarray(cov, dtype=float))
        order = np.argsort(vals)[::-1]
        return statkit.TruncatedGaussianModel(
            mean=np.asarray(mean, dtype=float),
            eigenvalues=np.clip(vals[order], 0, None),
            eigenvectors=vecs[:, order],
            ridge=ridge,
        )

    def test_scalar_formula(self):
        model = self._model([0.0, 0.0], [[2.0, 1.0], [1.0, 2.0]])
        out = conditional_expectation(model, [0], [2.0])
        assert abs(out[0] - 1.0) < 1e-12

    def test_zero_cross_covariance_returns_mean(self):
        model = self._model([3.0, -1.0], [[2.0, 0.0], [0.0, 5.0]])
        out = conditional_expectation(model, [0], [10.0])
        assert abs(out[0] + 1.0) < 1e-12

    def test_observing_the_mean_returns_mean(self):
        cov = np.array([[3.0, 1.0, 0.5], [1.0, 2.0, 0.3], [0.5, 0.3, 1.5]])
        model = self._model([1.0, 2.0, 3.0], cov)
        out = conditional_expectation(model, [0, 2], [1.0, 3.0])
        assert abs(out[0] - 2.0) < 1e-12

    def test_matches_block_solve_oracle(self):
        dim = 6
        a = RNG.normal(0, 1, (dim, dim))
        cov = a @ a.T + 0.5 * np.eye(dim)
        mean = RNG.normal(0, 2, dim)
        model = self._model(mean, cov)
        obs = np.array([0, 2, 5])
        vals = RNG.normal(0, 2, 3)
        out = conditional_expectation(model, obs, vals)
        unobs = np.array([1, 3, 4])
        ref = mean[unobs] + cov[np.ix_(unobs, obs)] @ np.linalg.solve(
            cov[np.ix_(obs, obs)], vals - mean[obs]
        )
        assert np.max(np.abs(out - ref)) < 1e-9

    def test_empty_observation_gives_unconditional_mean(self):
        model = self._model([1.0, 2.0], [[1.0, 0.2], [0.2, 1.0]])
        assert np.allclose(conditional_expectation(model, [], []), [1.0, 2.0])

    def test_singular_block(self):
        model = self._model([0.0, 0.0], [[0.0, 0.0], [0.0, 1.0]], ridge=0.0)
        with pytest.raises(SingularConditioningBlock):
            conditional_expectation(model, [0], [1.0])
