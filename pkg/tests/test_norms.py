"""Interpolation, spectral, empirical and integer Sobolev norms."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from sobocal.exceptions import ShapeError, UnsupportedOrder
from sobocal.kernels import KernelSpec
from sobocal.norms import (
    NormSpace,
    eigenfunction_norm_contrast,
    interpolant_norm_bound,
    norm_sq,
    sobolev_integer_norm_sq,
    uniform_design,
)
from sobocal.spectral import nystrom_decompose

EXP1 = KernelSpec.matern(1)


def exponential_rkhs_norm_sq(f, df, gamma):
    """Closed-form RKHS norm of ``exp(-gamma |x - y|)`` on [0, 1]."""
    bulk = quad(lambda t: df(t) ** 2 + gamma**2 * f(t) ** 2, 0, 1, limit=200)[0] / (2 * gamma)
    return bulk + 0.5 * (f(0.0) ** 2 + f(1.0) ** 2)


def sin2pi(x):
    return np.sin(2 * np.pi * np.asarray(x))


def dsin2pi(x):
    return 2 * np.pi * np.cos(2 * np.pi * np.asarray(x))


vectors = st.integers(0, 10_000).map(lambda s: np.random.default_rng(s).standard_normal(40))


@pytest.fixture(scope="module")
def space40():
    return NormSpace.rkhs(KernelSpec.matern(2), uniform_design(40, seed=1))


class TestInterpolationNorm:
    def test_zero(self, space40):
        assert norm_sq(np.zeros(40), space40) == 0.0

    def test_reproducing_property(self, space40):
        x = space40.design
        col = KernelSpec.matern(2)(x, x[[7]])[:, 0]
        assert norm_sq(col, space40) == pytest.approx(1.0, abs=1e-8)

    def test_shape_mismatch(self, space40):
        with pytest.raises(ShapeError):
            norm_sq(np.zeros(39), space40)

    def test_matches_dense_design(self):
        coarse = NormSpace.rkhs(EXP1, uniform_design(100, seed=0)).evaluate(sin2pi)
        dense = NormSpace.rkhs(EXP1, uniform_design(2000, seed=0)).evaluate(sin2pi)
        assert coarse == pytest.approx(dense, rel=0.02)

    @pytest.mark.parametrize("gamma", [0.5, 1.0, 4.0])
    def test_converges_to_closed_form(self, gamma):
        kernel = KernelSpec.matern(1, length_scale=gamma)
        exact = exponential_rkhs_norm_sq(sin2pi, dsin2pi, gamma)
        design = np.concatenate([[0.0], np.sort(np.random.default_rng(0).uniform(size=1998)), [1.0]])
        approx = NormSpace.rkhs(kernel, design).evaluate(sin2pi)
        assert approx <= exact * (1 + 1e-8)
        assert approx == pytest.approx(exact, rel=1e-3)

    def test_kernel_section_has_unit_norm_in_closed_form(self):
        gamma = 2.0
        val = exponential_rkhs_norm_sq(lambda t: np.exp(-gamma * t), lambda t: -gamma * np.exp(-gamma * t), gamma)
        assert val == pytest.approx(1.0, rel=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(vectors, st.floats(-50, 50))
    def test_homogeneity(self, space40, g, alpha):
        base = norm_sq(g, space40)
        assert norm_sq(alpha * g, space40) == pytest.approx(alpha**2 * base, rel=1e-12, abs=1e-300)

    @settings(max_examples=40, deadline=None)
    @given(vectors, vectors)
    def test_triangle_inequality(self, space40, g, h):
        lhs = np.sqrt(norm_sq(g + h, space40))
        assert lhs <= np.sqrt(norm_sq(g, space40)) + np.sqrt(norm_sq(h, space40)) + 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(5, 60), st.integers(1, 40), st.integers(0, 10_000))
    def test_monotone_on_nested_designs(self, n, extra, seed):
        design = uniform_design(n + extra, seed=seed)
        rng = np.random.default_rng(seed)
        small_idx = np.sort(rng.choice(n + extra, size=n, replace=False))

        def g(x):
            return np.sin(5 * x) + x**2

        small = NormSpace.rkhs(EXP1, design[small_idx], jitter=0.0).evaluate(g)
        big = NormSpace.rkhs(EXP1, design, jitter=0.0).evaluate(g)
        assert big >= small - 1e-10 * max(1.0, big)

    def test_duplicate_design_rejected(self):
        with pytest.raises(ValueError):
            NormSpace.rkhs(EXP1, [0.1, 0.1, 0.3])


class TestEmpiricalL2:
    @settings(max_examples=40, deadline=None)
    @given(vectors, st.floats(0.1, 10.0))
    def test_matches_scaled_identity_gram(self, g, c):
        design = uniform_design(40, seed=3)
        l2 = norm_sq(g, NormSpace.empirical_l2(design))
        interp = norm_sq(g, NormSpace.from_gram(design, c * np.eye(40)))
        assert interp * c == pytest.approx(40 * l2, rel=1e-12)

    def test_mean_square(self):
        space = NormSpace.empirical_l2(uniform_design(4))
        assert norm_sq(np.array([1.0, -1.0, 2.0, 0.0]), space) == pytest.approx(1.5)

    def test_from_gram_shape(self):
        with pytest.raises(ShapeError):
            NormSpace.from_gram(uniform_design(4), np.eye(3))


class TestSpectralNorm:
    def test_matches_interpolation_norm_at_full_rank(self):
        """With beta = 1 and all terms kept, the spectral and interpolation norms agree."""
        basis = nystrom_decompose(KernelSpec.matern(2), M=200, N=60)
        spectral = NormSpace.spectral(basis, 1.0)

        def g(x):
            return np.exp(-x) * np.cos(3 * x)

        interp = NormSpace.rkhs(KernelSpec.matern(2), uniform_design(300, seed=0)).evaluate(g)
        assert spectral.evaluate(g) == pytest.approx(interp, rel=0.05)

    def test_eigenfunction_norms(self):
        basis = nystrom_decompose(KernelSpec.matern(2), M=300, N=10)
        space = NormSpace.spectral(basis, 0.5)
        for j in (0, 4, 9):
            assert norm_sq(basis.values[:, j], space) == pytest.approx(basis.eigenvalues[j] ** -0.5, rel=1e-8)


class TestSobolevInteger:
    def test_constant(self):
        assert sobolev_integer_norm_sq(lambda x: np.full_like(x, 3.0), 1) == pytest.approx(9.0, rel=1e-12)

    def test_sine_first_order(self):
        expected = 0.5 + 2 * np.pi**2
        assert sobolev_integer_norm_sq(sin2pi, 1) == pytest.approx(expected, rel=1e-4)
        assert expected == pytest.approx(20.2392, abs=1e-4)

    def test_sine_second_order(self):
        expected = 0.5 + 2 * np.pi**2 + 8 * np.pi**4
        assert sobolev_integer_norm_sq(sin2pi, 2, np.linspace(0, 1, 2000)) == pytest.approx(expected, rel=1e-3)

    def test_order_zero_is_l2(self):
        assert sobolev_integer_norm_sq(sin2pi, 0) == pytest.approx(0.5, rel=1e-5)

    def test_space_matches_function(self):
        space = NormSpace.sobolev_integer(1)
        assert space.evaluate(sin2pi) == pytest.approx(sobolev_integer_norm_sq(sin2pi, 1), rel=1e-14)

    @pytest.mark.parametrize("m", [3, -1])
    def test_unsupported_order(self, m):
        with pytest.raises(UnsupportedOrder):
            sobolev_integer_norm_sq(sin2pi, m)

    def test_grid_checks(self):
        with pytest.raises(ValueError):
            sobolev_integer_norm_sq(sin2pi, 1, np.linspace(0, 1, 50))
        with pytest.raises(ValueError):
            sobolev_integer_norm_sq(sin2pi, 1, np.linspace(0, 1, 300) ** 2)


class TestInterpolantBound:
    def test_zero_on_design(self):
        space = NormSpace.rkhs(EXP1, uniform_design(30, seed=0))
        assert interpolant_norm_bound(space, space.design) == 0.0

    def test_decreases_with_design_size(self):
        probes = np.linspace(0, 1, 2001)
        b10 = interpolant_norm_bound(NormSpace.rkhs(EXP1, uniform_design(10, seed=0)), probes)
        b100 = interpolant_norm_bound(NormSpace.rkhs(EXP1, uniform_design(100, seed=0)), probes)
        assert b100 < b10

    def test_dense_design_certifies(self):
        probes = np.linspace(0, 1, 5001)
        grid = NormSpace.rkhs(EXP1, (np.arange(1000) + 0.5) / 1000)
        assert interpolant_norm_bound(grid, probes) < 0.05
        # Random designs leave gaps of order log(N)/N, so the bound is larger.
        random = NormSpace.rkhs(EXP1, uniform_design(1000, seed=0))
        assert 0.05 < interpolant_norm_bound(random, probes) < 0.1


class TestEigenfunctionContrast:
    def test_equal_l2_large_norm_ratio(self):
        basis = nystrom_decompose(EXP1, M=1000, N=50)
        out = eigenfunction_norm_contrast(basis, c=10.0)
        assert out["k"] <= 50
        assert out["l2_first"] == pytest.approx(1.0, abs=1e-6)
        assert out["l2_k"] == pytest.approx(1.0, abs=1e-6)
        assert out["ratio"] > 10
        assert out["interp_ratio"] > 10
