"""Joint generation models: closed forms, kernel estimates, sampling."""

import numpy as np
import pytest

from repool import (
    DegenerateModelError,
    EmpiricalJointModel,
    EstimationSupportError,
    GaussianJointModel,
)

from helpers import random_gaussian_model

MU2 = np.array([10.0, 20.0])
COV2 = np.diag([4.0, 9.0])


def test_gaussian_total_moments():
    model = GaussianJointModel(MU2, COV2)
    assert model.total_mean == 30.0
    assert model.total_var == 13.0
    np.testing.assert_allclose(model.component_stds, [2.0, 3.0])


def test_gaussian_sum_quantile_frozen():
    model = GaussianJointModel(MU2, COV2)
    assert model.sum_quantile(0.75) == pytest.approx(32.43190737910687, abs=1e-12)
    assert model.sum_quantile(0.5) == pytest.approx(30.0, abs=1e-12)
    assert model.sum_cdf(30.0) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        model.sum_quantile(0.0)
    with pytest.raises(ValueError):
        model.sum_quantile(1.0)


def test_gaussian_cdf_quantile_roundtrip():
    model = GaussianJointModel(MU2, COV2)
    for q in (0.01, 0.2, 0.5, 0.9, 0.999):
        assert model.sum_cdf(model.sum_quantile(q)) == pytest.approx(q, abs=1e-12)


def test_gaussian_pdf_matches_difference_quotient():
    model = GaussianJointModel(MU2, COV2)
    h = 1e-6
    for alpha in (25.0, 30.0, 36.0):
        fd = (model.sum_cdf(alpha + h) - model.sum_cdf(alpha - h)) / (2 * h)
        assert model.sum_pdf(alpha) == pytest.approx(fd, rel=1e-6)


def test_gaussian_conditional_mean_frozen():
    model = GaussianJointModel(MU2, COV2)
    alpha = 32.43190737910687
    assert model.conditional_mean(0, alpha) == pytest.approx(10.748279193571344, abs=1e-12)
    means = model.conditional_means(alpha)
    assert means.sum() == pytest.approx(alpha, abs=1e-9)
    arr = model.conditional_mean(1, np.array([30.0, alpha]))
    np.testing.assert_allclose(arr, [20.0, alpha - 10.748279193571344], atol=1e-9)


def test_gaussian_slopes_independent_case():
    model = GaussianJointModel([10.0, 10.0], np.diag([4.0, 4.0]))
    slopes = model.conditional_mean_slopes()
    np.testing.assert_allclose(slopes.slopes, [0.5, 0.5])
    assert slopes.max_slope == 0.5


def test_gaussian_slopes_negative_correlation_case():
    model = GaussianJointModel([10.0, 10.0], [[9.0, -5.0], [-5.0, 4.0]])
    slopes = model.conditional_mean_slopes()
    np.testing.assert_allclose(slopes.slopes, [4.0 / 3.0, -1.0 / 3.0], atol=1e-12)
    assert slopes.max_slope == pytest.approx(4.0 / 3.0, abs=1e-12)


def test_gaussian_slopes_sum_to_one_random():
    rng = np.random.default_rng(3)
    for _ in range(50):
        model = random_gaussian_model(rng, require_condition=False)
        slopes = model.conditional_mean_slopes().slopes
        assert slopes.sum() == pytest.approx(1.0, abs=1e-9)
        alpha = model.total_mean + rng.uniform(-2, 2) * model.total_std
        assert model.conditional_means(alpha).sum() == pytest.approx(alpha, abs=1e-9)


def test_gaussian_input_validation():
    with pytest.raises(ValueError):
        GaussianJointModel([10.0], [[4.0, 0.0]])
    with pytest.raises(ValueError):
        GaussianJointModel([10.0, 20.0], [[4.0, 3.0], [1.0, 9.0]])
    with pytest.raises(ValueError):
        GaussianJointModel([10.0, 20.0], [[4.0, np.nan], [np.nan, 9.0]])
    with pytest.raises(ValueError):
        GaussianJointModel([10.0, 20.0], [[1.0, 2.0], [2.0, 1.0]])  # eigenvalue -1


def test_gaussian_repairs_tiny_negative_eigenvalues():
    # Sample covariances can land epsilon-outside the PSD cone.
    cov = np.array([[1.0, 1.0], [1.0, 1.0]]) - 1e-12 * np.diag([1.0, -1.0])
    model = GaussianJointModel([5.0, 5.0], 0.5 * (cov + cov.T))
    eigs = np.linalg.eigvalsh(model.covariance)
    assert eigs.min() >= 0.0
    assert model.total_var == pytest.approx(4.0, rel=1e-9)


def test_gaussian_degenerate_flag_and_rejection():
    model = GaussianJointModel([10.0, 20.0], np.zeros((2, 2)))
    assert model.degenerate
    with pytest.raises(DegenerateModelError):
        model.sum_cdf(30.0)
    with pytest.raises(DegenerateModelError):
        model.conditional_means(30.0)
    # Positive variances that cancel in the total are degenerate too.
    model = GaussianJointModel([0.0, 0.0], [[1.0, -1.0], [-1.0, 1.0]])
    assert model.degenerate


def test_gaussian_marginal_and_merge():
    model = GaussianJointModel([10.0, 20.0, 5.0], np.diag([4.0, 9.0, 1.0]))
    sub = model.marginal([0, 2])
    assert sub.total_mean == 15.0
    assert sub.total_var == 5.0
    merged = model.merge([0, 1])
    assert merged.n_units == 2
    np.testing.assert_allclose(merged.mean, [30.0, 5.0])
    np.testing.assert_allclose(merged.covariance, [[13.0, 0.0], [0.0, 1.0]])
    assert merged.total_mean == model.total_mean
    assert merged.total_var == model.total_var


def test_gaussian_merge_preserves_total_with_correlation():
    rng = np.random.default_rng(5)
    for _ in range(20):
        model = random_gaussian_model(rng, n_min=3, n_max=5, require_condition=False)
        members = [0, 2]
        merged = model.merge(members)
        assert merged.total_mean == pytest.approx(model.total_mean, rel=1e-12)
        assert merged.total_var == pytest.approx(model.total_var, rel=1e-9)
        # Merged conditional mean equals the sum of the members' conditional means.
        alpha = model.total_mean + 1.3 * model.total_std
        want = sum(model.conditional_mean(i, alpha) for i in members)
        assert merged.conditional_mean(0, alpha) == pytest.approx(want, rel=1e-9)


def test_member_index_validation():
    model = GaussianJointModel(MU2, COV2)
    with pytest.raises(ValueError):
        model.marginal([])
    with pytest.raises(ValueError):
        model.marginal([0, 0])
    with pytest.raises(ValueError):
        model.marginal([2])


def test_gaussian_sampling_deterministic_and_consistent():
    model = GaussianJointModel(MU2, COV2)
    a = model.sample(1000, seed=42)
    b = model.sample(1000, seed=42)
    np.testing.assert_array_equal(a, b)
    c = model.sample(1000, seed=43)
    assert not np.array_equal(a, c)

    big = model.sample(200_000, seed=0)
    np.testing.assert_allclose(big.mean(axis=0), MU2, atol=0.05)
    np.testing.assert_allclose(np.cov(big.T), COV2, atol=0.2)


def test_gaussian_sampling_physical_clips_at_zero():
    model = GaussianJointModel([-1.0, 0.5], np.diag([1.0, 1.0]))
    draws = model.sample(5000, seed=1, physical=True)
    assert draws.min() >= 0.0
    assert (model.sample(5000, seed=1).min() < 0.0)


def test_empirical_sum_distribution_small():
    model = EmpiricalJointModel([[10.0], [20.0], [30.0]])
    assert model.sum_quantile(0.5) == 20.0
    assert model.sum_quantile(1.0) == 30.0
    assert model.sum_quantile(1.0 / 3.0) == 10.0
    assert model.sum_quantile(0.34) == 20.0
    with pytest.raises(ValueError):
        model.sum_quantile(0.0)
    assert model.sum_cdf(9.0) == 0.0
    assert model.sum_cdf(15.0) == pytest.approx(1.0 / 3.0)
    assert model.sum_cdf(20.0) == pytest.approx(2.0 / 3.0)
    assert model.sum_cdf(31.0) == 1.0
    assert model.total_mean == 20.0


def test_empirical_weights_validation():
    scen = [[10.0], [20.0]]
    with pytest.raises(ValueError):
        EmpiricalJointModel(scen, weights=[0.6, 0.6])
    with pytest.raises(ValueError):
        EmpiricalJointModel(scen, weights=[-0.2, 1.2])
    with pytest.raises(ValueError):
        EmpiricalJointModel(scen, weights=[0.5, 0.25, 0.25])
    model = EmpiricalJointModel(scen, weights=[0.25, 0.75])
    assert model.total_mean == 17.5
    assert model.sum_quantile(0.25) == 10.0
    assert model.sum_quantile(0.26) == 20.0


def test_empirical_rejects_bad_scenarios():
    with pytest.raises(ValueError):
        EmpiricalJointModel(np.empty((0, 2)))
    with pytest.raises(ValueError):
        EmpiricalJointModel([10.0, 20.0])
    with pytest.raises(ValueError):
        EmpiricalJointModel([[np.nan]])


def test_empirical_silverman_bandwidth():
    rng = np.random.default_rng(9)
    scen = rng.normal(size=(400, 3))
    model = EmpiricalJointModel(scen)
    assert model.bandwidth == pytest.approx(1.06 * model.total_std * 400 ** (-0.2), rel=1e-12)
    fixed = EmpiricalJointModel(scen, bandwidth=0.5)
    assert fixed.bandwidth == 0.5


def test_empirical_conditional_mean_is_kernel_average():
    scen = np.array([[1.0, 2.0], [2.0, 3.0], [3.0, 5.0]])
    model = EmpiricalJointModel(scen, bandwidth=1.0)
    sums = scen.sum(axis=1)
    k = np.exp(-0.5 * (5.0 - sums) ** 2)
    w = k / k.sum()
    assert model.conditional_mean(0, 5.0) == pytest.approx(w @ scen[:, 0], rel=1e-12)
    np.testing.assert_allclose(model.conditional_means(5.0), w @ scen, rtol=1e-12)


def test_empirical_conditional_means_sum_to_kernel_smoothed_total():
    rng = np.random.default_rng(21)
    scen = rng.normal(loc=[10.0, 20.0], scale=[2.0, 3.0], size=(500, 2))
    model = EmpiricalJointModel(scen)
    for alpha in (26.0, 30.0, 33.0):
        means = model.conditional_means(alpha)
        # The estimates sum to the smoothed total, near alpha in the interior.
        assert abs(means.sum() - alpha) <= model.bandwidth


def test_empirical_conditional_mean_tracks_gaussian_truth():
    rng = np.random.default_rng(33)
    truth = GaussianJointModel(MU2, [[4.0, 1.0], [1.0, 9.0]])
    scen = truth.sample(4000, seed=12)
    model = EmpiricalJointModel(scen)
    for alpha in (26.0, 30.0, 34.0):
        want = truth.conditional_mean(0, alpha)
        got = model.conditional_mean(0, alpha)
        assert got == pytest.approx(want, abs=0.25)


def test_empirical_support_error_far_from_data():
    model = EmpiricalJointModel([[10.0], [20.0], [30.0]], bandwidth=1.0)
    with pytest.raises(EstimationSupportError):
        model.conditional_mean(0, 30.0 + 9.0)
    # Inside the support window the estimate exists.
    assert model.conditional_mean(0, 30.0 + 7.0) == pytest.approx(30.0, abs=1e-6)


def test_empirical_slopes_approximate_gaussian_truth():
    truth = GaussianJointModel(MU2, [[4.0, 1.0], [1.0, 9.0]])
    scen = truth.sample(6000, seed=55)
    model = EmpiricalJointModel(scen)
    want = truth.conditional_mean_slopes().slopes
    got = model.conditional_mean_slopes().slopes
    # Max of ~100 noisy kernel estimates sits above the constant truth.
    np.testing.assert_allclose(got, want, atol=0.2)
    assert np.all(got >= want - 0.1)


def test_empirical_slope_grid_stays_inside_data():
    truth = GaussianJointModel(MU2, [[4.0, 1.0], [1.0, 9.0]])
    model = EmpiricalJointModel(truth.sample(6000, seed=55))
    grid = model.slope_grid()
    assert grid.size == 101
    assert grid[0] >= model.scenarios.sum(axis=1).min()
    assert grid[-1] <= model.scenarios.sum(axis=1).max()
    # An explicit grid overrides the default range.
    wide = np.linspace(grid[0] - 1.0, grid[-1] + 1.0, 51)
    model.conditional_mean_slopes(grid=wide)
    with pytest.raises(ValueError):
        model.conditional_mean_slopes(grid=[1.0, 2.0])


def test_empirical_degenerate_rejected():
    model = EmpiricalJointModel([[5.0, 5.0], [5.0, 5.0]])
    assert model.degenerate
    with pytest.raises(DegenerateModelError):
        model.sum_quantile(0.5)
    with pytest.raises(DegenerateModelError):
        model.conditional_mean_slopes()


def test_empirical_marginal_and_merge():
    scen = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])
    model = EmpiricalJointModel(scen)
    sub = model.marginal([1])
    np.testing.assert_array_equal(sub.scenarios, scen[:, [1]])
    merged = model.merge([0, 2])
    assert merged.n_units == 2
    np.testing.assert_array_equal(merged.scenarios[:, 0], scen[:, 0] + scen[:, 2])
    np.testing.assert_array_equal(merged.scenarios[:, 1], scen[:, 1])
    assert merged.total_mean == model.total_mean
    assert merged.bandwidth == model.bandwidth


def test_empirical_sampling_resamples_scenarios():
    scen = np.array([[10.0, 1.0], [20.0, 2.0], [-30.0, 3.0]])
    model = EmpiricalJointModel(scen)
    draws = model.sample(200, seed=3)
    rows = {tuple(r) for r in draws}
    assert rows <= {tuple(r) for r in scen}
    np.testing.assert_array_equal(draws, model.sample(200, seed=3))
    assert model.sample(200, seed=3, physical=True).min() >= 0.0
