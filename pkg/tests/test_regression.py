"""Kernel ridge regression, GCV, GP posteriors and the sklearn wrappers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from sobocal.exceptions import DatasetError, SelectionFailed
from sobocal.kernels import KernelSpec
from sobocal.models import physical_mean
from sobocal.regression import (
    DEFAULT_LAMBDA_GRID,
    DEFAULT_MU_GRID,
    Dataset,
    GaussianProcessRegressor,
    KernelRidgeGCV,
    fit_krr,
    gcv_scores,
    gcv_select_lambda,
    gp_posterior,
    sample_gp_path,
    select_mu_validation,
    simulate_dataset,
)

MATERN2 = KernelSpec.matern(2)


class TestDataset:
    def test_requires_two_rows(self):
        with pytest.raises(DatasetError, match="at least 2 rows"):
            Dataset([0.5], [1.0])

    def test_rejects_out_of_domain(self):
        with pytest.raises(DatasetError):
            Dataset([0.1, 1.5], [0.0, 1.0])

    def test_rejects_nonfinite(self):
        with pytest.raises(DatasetError):
            Dataset([0.1, 0.2], [np.nan, 1.0])

    def test_csv_round_trip_is_exact(self, tmp_path):
        data = simulate_dataset(physical_mean, 20, 0.1, seed=3)
        path = tmp_path / "d.csv"
        data.to_csv(path, header_lines=["seed 3"])
        back = Dataset.from_csv(path)
        np.testing.assert_array_equal(back.inputs, data.inputs)
        np.testing.assert_array_equal(back.responses, data.responses)

    def test_csv_error_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,y\n0.1,1.0\n0.2,abc\n")
        with pytest.raises(DatasetError) as info:
            Dataset.from_csv(path)
        assert info.value.line == 3
        assert str(info.value).startswith("line 3")

    def test_simulation_deterministic(self):
        a = simulate_dataset(physical_mean, 50, 0.1, seed=11)
        b = simulate_dataset(physical_mean, 50, 0.1, seed=11)
        assert a.inputs.tobytes() == b.inputs.tobytes()
        assert a.responses.tobytes() == b.responses.tobytes()


class TestKernelRidge:
    def test_vanishing_penalty_interpolates(self):
        data = Dataset([0.1, 0.5, 0.8], [1.0, -2.0, 0.5])
        model = fit_krr(data, MATERN2, 1e-12)
        np.testing.assert_allclose(model(data.inputs), data.responses, atol=1e-6)

    def test_matches_dense_solve(self, rng):
        x = rng.uniform(size=15)
        data = Dataset(x, np.full(15, 2.0))
        lam = 0.01
        model = fit_krr(data, MATERN2, lam)
        R = MATERN2(x, x)
        alpha = np.linalg.solve(R + 15 * lam * np.eye(15), data.responses)
        probe = np.linspace(0, 1, 13)
        np.testing.assert_allclose(model(probe), MATERN2(probe, x) @ alpha, rtol=1e-10)
        # A = R (R + n lam I)^{-1} is symmetric with spectrum in [0, 1).
        assert np.mean(model(x)) < 2.0
        assert model.rkhs_norm**2 == pytest.approx(alpha @ R @ alpha, rel=1e-10)

    def test_first_order_optimality(self, rng):
        """Perturbing the fitted coefficients never lowers the penalised objective."""
        data = simulate_dataset(physical_mean, 40, 0.1, seed=5)
        lam = 1e-3
        model = fit_krr(data, MATERN2, lam)
        R = MATERN2(data.inputs, data.inputs)

        def penalised(a):
            return np.mean((data.responses - R @ a) ** 2) + lam * a @ R @ a

        base = penalised(model.coefficients)
        for _ in range(20):
            delta = rng.standard_normal(data.n)
            delta *= 1e-3 / np.linalg.norm(delta)
            assert penalised(model.coefficients + delta) >= base - 1e-14

    def test_rejects_nonpositive_penalty(self):
        with pytest.raises(ValueError):
            fit_krr(Dataset([0.1, 0.2], [0.0, 1.0]), MATERN2, 0.0)

    def test_consistency_as_n_grows(self):
        f = physical_mean
        grid = np.linspace(0, 1, 100)
        errs = []
        for n in (50, 100, 200):
            vals = []
            for seed in range(10):
                data = simulate_dataset(f, n, 0.1, seed=seed)
                lam = gcv_select_lambda(data, MATERN2)
                vals.append(np.sqrt(np.mean((fit_krr(data, MATERN2, lam)(grid) - f(grid)) ** 2)))
            errs.append(np.mean(vals))
        assert errs[0] > errs[1] > errs[2]


class TestGcv:
    def test_matches_explicit_hat_matrix(self, rng):
        data = simulate_dataset(physical_mean, 30, 0.1, seed=2)
        R = MATERN2(data.inputs, data.inputs)
        n = data.n
        lams = [1e-5, 1e-3, 1e-1]
        expected = []
        for lam in lams:
            A = R @ np.linalg.inv(R + n * lam * np.eye(n))
            resid = (np.eye(n) - A) @ data.responses
            expected.append(np.mean(resid**2) / (np.trace(np.eye(n) - A) / n) ** 2)
        np.testing.assert_allclose(gcv_scores(data, MATERN2, lams), expected, rtol=1e-8)

    def test_pure_noise_prefers_heavy_smoothing(self):
        data = simulate_dataset(lambda x: np.zeros_like(x), 100, 1.0, seed=0)
        lam = gcv_select_lambda(data, MATERN2)
        assert lam >= DEFAULT_LAMBDA_GRID[-4]

    def test_noiseless_prefers_interpolation(self):
        data = simulate_dataset(physical_mean, 60, 0.0, seed=0)
        lam = gcv_select_lambda(data, MATERN2)
        assert lam <= DEFAULT_LAMBDA_GRID[4]

    def test_example1_within_grid(self):
        data = simulate_dataset(physical_mean, 200, 0.1, seed=1)
        assert 1e-8 <= gcv_select_lambda(data, MATERN2) <= 1.0

    def test_empty_grid(self):
        with pytest.raises(SelectionFailed):
            gcv_select_lambda(Dataset([0.1, 0.2], [0.0, 1.0]), MATERN2, [])


class TestGaussianProcess:
    def test_matches_dense_formulas(self, rng):
        x = rng.uniform(size=10)
        y = rng.standard_normal(10)
        mu, s2 = 0.5, 1.3
        model = gp_posterior(Dataset(x, y), MATERN2, mu, process_variance=s2)
        probe = np.linspace(0, 1, 9)
        R = MATERN2(x, x) + mu * np.eye(10)
        r = MATERN2(probe, x)
        mean = r @ np.linalg.solve(R, y)
        var = s2 * (1.0 - np.einsum("ij,ji->i", r, np.linalg.solve(R, r.T)))
        np.testing.assert_allclose(model(probe), mean, atol=1e-10)
        np.testing.assert_allclose(model.variance(probe), var, atol=1e-10)

    def test_noiseless_limit(self):
        x = np.array([0.1, 0.4, 0.9])
        y = np.array([1.0, 0.0, -1.0])
        model = gp_posterior(Dataset(x, y), MATERN2, 1e-10, process_variance=1.0)
        np.testing.assert_allclose(model(x), y, atol=1e-6)
        np.testing.assert_allclose(model.variance(x), 0.0, atol=1e-6)

    def test_prior_reversion_far_away(self):
        x = np.array([0.0, 0.01])
        model = gp_posterior(Dataset(x, [1.0, 1.0], domain=(0, 100)), KernelSpec.matern(2, length_scale=5), 0.1, 2.0)
        assert abs(model([90.0])[0]) < 1e-10
        assert model.variance([90.0])[0] == pytest.approx(2.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(3, 30), st.floats(1e-4, 1.0), st.integers(0, 1000))
    def test_krr_gp_identity(self, n, lam, seed):
        data = simulate_dataset(physical_mean, n, 0.1, seed=seed)
        probe = np.linspace(0, 1, 17)
        krr = fit_krr(data, MATERN2, lam)(probe)
        gp = gp_posterior(data, MATERN2, n * lam)(probe)
        np.testing.assert_allclose(gp, krr, atol=1e-10, rtol=0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(3, 20), st.integers(0, 1000))
    def test_variance_nonincreasing_on_nested_designs(self, n, seed):
        data = simulate_dataset(physical_mean, n + 1, 0.1, seed=seed)
        probe = np.linspace(0, 1, 25)
        small = gp_posterior(data.subset(np.arange(n)), MATERN2, 0.1, 1.0).variance(probe)
        big = gp_posterior(data, MATERN2, 0.1, 1.0).variance(probe)
        assert np.all(big <= small + 1e-12)


class TestMuSelection:
    def test_single_element_grid(self):
        data = simulate_dataset(physical_mean, 20, 0.1, seed=0)
        assert select_mu_validation(data, MATERN2, [0.3]) == 0.3

    def test_empty_grid(self):
        data = simulate_dataset(physical_mean, 20, 0.1, seed=0)
        with pytest.raises(SelectionFailed):
            select_mu_validation(data, MATERN2, [])

    @pytest.mark.xfail(strict=True, reason="hold-out MSE is nearly flat in mu; see decisions ledger")
    def test_recovers_generating_ratio(self):
        """Data drawn from the GP prior with known noise ratio."""
        mu_true = DEFAULT_MU_GRID[12]
        step = np.log10(DEFAULT_MU_GRID[1] / DEFAULT_MU_GRID[0])
        hits = 0
        for rep in range(50):
            rng = np.random.default_rng(rep)
            x = rng.uniform(size=200)
            cov = MATERN2(x, x) + 1e-10 * np.eye(200)
            f = np.linalg.cholesky(cov) @ rng.standard_normal(200)
            y = f + np.sqrt(mu_true) * rng.standard_normal(200)
            mu = select_mu_validation(Dataset(x, y), MATERN2, seed=rep)
            hits += abs(np.log10(mu / mu_true)) <= step + 1e-9
        assert hits >= 40

    def test_example2_pilot_is_positive(self):
        data = simulate_dataset(physical_mean, 300, 0.05, seed=4)
        mu = select_mu_validation(data, MATERN2, holdout_fraction=0.3)
        assert np.isfinite(mu) and mu > 0


class TestGaussianPaths:
    def test_zero_variance_returns_mean(self):
        grid = np.linspace(0, 1, 11)
        path = sample_gp_path(MATERN2, physical_mean, grid, 0.0, seed=0)
        np.testing.assert_array_equal(path.values, physical_mean(grid))

    def test_empirical_covariance(self):
        grid = np.array([0.2, 0.5])
        draws = np.array([sample_gp_path(MATERN2, np.zeros_like, grid, 0.1, seed=s).values for s in range(2000)])
        emp = np.cov(draws.T)
        np.testing.assert_allclose(emp, 0.1 * MATERN2(grid, grid), rtol=0.1)

    def test_tail_bound(self):
        grid = np.linspace(0, 1, 501)
        inside = 0
        for s in range(200):
            path = sample_gp_path(MATERN2, physical_mean, grid, 0.1, seed=s)
            inside += np.max(np.abs(path.values - physical_mean(grid))) <= 6 * np.sqrt(0.1)
        assert inside >= 198

    def test_deterministic(self):
        grid = np.linspace(0, 1, 51)
        a = sample_gp_path(MATERN2, physical_mean, grid, 0.1, seed=9)
        b = sample_gp_path(MATERN2, physical_mean, grid, 0.1, seed=9)
        assert a.values.tobytes() == b.values.tobytes()
        assert a(0.33) == pytest.approx(np.interp(0.33, grid, a.values))


class TestEstimators:
    def test_kernel_ridge_clone_and_fit(self):
        data = simulate_dataset(physical_mean, 80, 0.05, seed=0)
        est = clone(KernelRidgeGCV(m=2))
        est.fit(data.inputs, data.responses)
        grid = np.linspace(0, 1, 50)[:, None]
        assert np.sqrt(np.mean((est.predict(grid) - physical_mean(grid[:, 0])) ** 2)) < 0.15
        assert est.get_params()["length_scale"] == 1.0

    def test_gp_regressor_std(self):
        data = simulate_dataset(physical_mean, 60, 0.05, seed=0)
        est = GaussianProcessRegressor(random_state=1).fit(data.inputs, data.responses)
        mean, std = est.predict(np.linspace(0, 1, 5)[:, None], return_std=True)
        assert mean.shape == std.shape == (5,)
        assert np.all(std >= 0)
        assert est.mu_ in DEFAULT_MU_GRID
