"""Calibration objective, optimizer and mode reductions."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from sobocal.calibration import (
    CalibrationProblem,
    KrrSurrogate,
    OptimizerConfig,
    SobolevCalibrator,
    build_norm_space,
    calibrate,
    fit_physical,
    mode_label,
    objective,
    parse_mode,
    true_parameter,
)
from sobocal.exceptions import ModelEvaluationError, OptimizationFailed
from sobocal.kernels import KernelSpec
from sobocal.models import example_c3, physical_mean
from sobocal.norms import NormSpace, uniform_design
from sobocal.regression import simulate_dataset


def shifted(x, theta):
    return physical_mean(x) - (theta[0] - 0.3)


def quadratic_offset(x, theta):
    return physical_mean(x) - (theta[0] ** 2 + 1.0)


def _problem(model=shifted, space=None, bounds=((-1.0, 1.0),), truth=physical_mean):
    space = space or NormSpace.rkhs(KernelSpec.matern(1), uniform_design(100, seed=0))
    return CalibrationProblem(truth, model, bounds, space)


class TestModes:
    @pytest.mark.parametrize(
        "mode,kind,order",
        [("sobolev:1", "sobolev", Fraction(1)), ("sobolev:9/8", "sobolev", Fraction(9, 8)), ("l2", "l2", Fraction(0)),
         ("ko", "ko", Fraction(2)), ("ko:3", "ko", Fraction(3)), ("sobolev:0", "l2", Fraction(0))],
    )
    def test_parse(self, mode, kind, order):
        assert parse_mode(mode) == (kind, order)

    def test_label_round_trip(self):
        for mode in ("sobolev:1", "l2", "ko:2"):
            assert mode_label(*parse_mode(mode)) == mode

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            parse_mode("bayes")

    def test_norm_space_routes(self):
        assert build_norm_space("sobolev:1", design_size=50).mode == "rkhs_interp"
        assert build_norm_space("l2", design_size=50).mode == "empirical_l2"
        space = build_norm_space("sobolev:1", design_size=50, route="power", M=200)
        assert space.mode == "spectral" and space.beta == pytest.approx(0.5)
        assert build_norm_space("sobolev:9/8", M=200).mode == "spectral"


class TestObjective:
    def test_zero_at_matching_parameter(self):
        assert objective([0.3], _problem()) == pytest.approx(0.0, abs=1e-20)

    def test_outside_bounds(self):
        with pytest.raises(ValueError):
            objective([1.5], _problem())

    def test_nonfinite_model_output(self):
        def broken(x, theta):
            out = np.asarray(x, dtype=float).copy()
            out[5] = np.nan
            return out

        with pytest.raises(ModelEvaluationError) as info:
            objective([0.0], _problem(broken))
        assert info.value.theta[0] == 0.0
        assert info.value.x is not None


class TestCalibrate:
    def test_shift_recovered(self):
        result = calibrate(_problem())
        assert result.theta[0] == pytest.approx(0.3, abs=1e-4)
        assert result.trace["converged"]
        assert result.objective >= 0

    def test_l2_quadratic_offset(self):
        problem = _problem(quadratic_offset, NormSpace.empirical_l2(uniform_design(100)))
        assert true_parameter(problem)[0] == pytest.approx(0.0, abs=1e-6)

    def test_argmin_beats_every_probe(self):
        problem = CalibrationProblem(
            physical_mean, example_c3, [(-1.0, 1.0)], NormSpace.rkhs(KernelSpec.matern(1), uniform_design(100))
        )
        result = calibrate(problem)
        probes = [objective([t], problem) for t in np.linspace(-1, 1, 201)]
        assert result.objective <= min(probes) + 1e-15

    @settings(max_examples=15, deadline=None)
    @given(st.floats(-0.9, 0.9), st.floats(0.2, 2.0))
    def test_bounds_respected(self, target, width):
        def model(x, theta):
            return physical_mean(x) - (theta[0] - target)

        bounds = [(target - width, target + 0.5 * width)]
        result = calibrate(_problem(model, NormSpace.empirical_l2(uniform_design(50)), bounds))
        evals = np.asarray(result.trace["evaluations"])
        assert np.all(evals >= bounds[0][0]) and np.all(evals <= bounds[0][1])

    def test_mode_reduction_to_l2(self):
        """Empirical L2 and an identity-Gram interpolation norm share the argmin."""
        design = uniform_design(120, seed=4)
        l2 = calibrate(_problem(example_c3, NormSpace.empirical_l2(design)))
        scaled = calibrate(_problem(example_c3, NormSpace.from_gram(design, 3.7 * np.eye(len(design)))))
        order0 = calibrate(_problem(example_c3, build_norm_space("sobolev:0", design_size=120, seed=4)))
        assert scaled.theta[0] == pytest.approx(l2.theta[0], abs=1e-6)
        assert order0.theta[0] == pytest.approx(l2.theta[0], abs=1e-6)

    def test_scale_invariance(self):
        design = uniform_design(80, seed=2)
        kernel = KernelSpec.matern(1)
        gram = kernel(design, design)
        a = calibrate(_problem(example_c3, NormSpace.from_gram(design, gram, 1e-10)))
        b = calibrate(_problem(example_c3, NormSpace.from_gram(design, gram / 25.0, 1e-10 / 25.0)))
        assert a.theta[0] == pytest.approx(b.theta[0], abs=1e-8)

    def test_two_parameters(self):
        def model(x, theta):
            return physical_mean(x) - theta[0] - theta[1] * np.asarray(x)

        problem = _problem(model, NormSpace.empirical_l2(uniform_design(100)), [(-1, 1), (-1, 1)])
        truth = lambda x: physical_mean(x) - 0.2 + 0.4 * np.asarray(x)  # noqa: E731
        result = calibrate(problem.with_physical(truth))
        np.testing.assert_allclose(result.theta, [0.2, -0.4], atol=1e-4)
        assert result.trace["restarts"] == 5

    def test_all_starts_failing(self):
        def model(x, theta):
            if np.allclose(theta, 0.0):
                return physical_mean(x)
            return np.full(np.shape(x), np.nan)

        problem = _problem(model, NormSpace.empirical_l2(uniform_design(20)), [(-1, 1), (-1, 1)])
        with pytest.raises(OptimizationFailed) as info:
            calibrate(problem)
        assert len(info.value.trace["evaluations"]) >= 5

    def test_deterministic(self):
        problem = _problem(example_c3)
        a, b = calibrate(problem), calibrate(problem)
        assert a.theta.tobytes() == b.theta.tobytes()
        assert a.trace["evaluations"] == b.trace["evaluations"]

    def test_consistency_trend(self):
        space = build_norm_space("sobolev:1", design_size=300, seed=0)
        base = CalibrationProblem(physical_mean, example_c3, [(-1.0, 1.0)], space)
        theta_star = true_parameter(base)[0]
        medians = []
        for n in (50, 100, 200):
            errs = []
            for seed in range(60):
                data = simulate_dataset(physical_mean, n, 0.05, seed=seed)
                fit = calibrate(base.with_physical(fit_physical(data)), OptimizerConfig(n_grid=101))
                errs.append(abs(fit.theta[0] - theta_star))
            medians.append(np.median(errs))
        assert medians[0] > medians[1] > medians[2]


class TestSurrogateAndEstimator:
    def test_krr_surrogate_tracks_cheap_model(self):
        surrogate = KrrSurrogate(example_c3, [(-1.0, 1.0)], n_runs=300, seed=0)
        x = np.linspace(0.05, 0.95, 30)
        np.testing.assert_allclose(surrogate(x, [0.2]), example_c3(x, [0.2]), atol=0.1)

    def test_estimator_api(self):
        data = simulate_dataset(physical_mean, 100, 0.05, seed=0)
        est = clone(SobolevCalibrator(computer_model=example_c3, bounds=[(-1.0, 1.0)], n_design=100))
        est.fit(data.inputs, data.responses)
        assert -1.0 <= est.theta_[0] <= 1.0
        X = np.linspace(0, 1, 7)[:, None]
        np.testing.assert_allclose(est.predict(X) + est.discrepancy(X), est.physical_model_(X), atol=1e-12)

    def test_estimator_requires_model(self):
        with pytest.raises(ValueError):
            SobolevCalibrator().fit(np.zeros((3, 1)), np.zeros(3))
