"""Nyström eigen-approximation of kernels on the unit cube.

The integral operator ``(T f)(s) = \\int K(s, t) f(t) dt`` on ``[0, 1]^d`` is
discretized with an equal-weight quadrature rule.  Eigenvectors of the weighted
kernel matrix are rescaled to unit quadrature norm and extended off the grid
with the Nyström formula.
"""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.linalg import eigh

from .exceptions import RankDeficientBasis
from .kernels import KernelSpec, as_points

DEFAULT_M = 1000
RANK_TOL = 1e-12

# truncation points used for each Sobolev smoothness in the simulations
DEFAULT_TRUNCATION = {
    Fraction(7, 8): 20,
    Fraction(1): 12,
    Fraction(9, 8): 12,
    Fraction(9, 5): 5,
    Fraction(2): 5,
}


@dataclass(frozen=True, eq=False)
class EigenBasis:
    """Truncated Mercer basis of a kernel computed on a quadrature grid.

    Attributes
    ----------
    grid : ndarray of shape (M, d)
        Quadrature nodes.
    weights : ndarray of shape (M,)
        Quadrature weights, each equal to ``1 / M``.
    eigenvalues : ndarray of shape (N,)
        Approximate operator eigenvalues in descending order.
    values : ndarray of shape (M, N)
        Eigenfunction values at the grid nodes, unit quadrature norm.
    nystrom_coefficients : ndarray of shape (N, M)
        Rows ``w_i e_j(g_i) / gamma_j`` so that ``e_j(x) = K(x, grid) @ row_j``.
    base_spec : KernelSpec
        Kernel that was decomposed.
    """

    grid: np.ndarray
    weights: np.ndarray
    eigenvalues: np.ndarray
    values: np.ndarray
    nystrom_coefficients: np.ndarray
    base_spec: KernelSpec

    @property
    def n_terms(self) -> int:
        return len(self.eigenvalues)

    @property
    def n_grid(self) -> int:
        return len(self.grid)

    def eigenfunctions(self, x) -> np.ndarray:
        """Nyström-extended eigenfunctions, an array of shape (n, N)."""
        x = as_points(x, self.base_spec.d)
        return self.base_spec(x, self.grid) @ self.nystrom_coefficients.T

    def truncate(self, n_terms: int) -> "EigenBasis":
        if not 1 <= n_terms <= self.n_terms:
            raise ValueError(f"n_terms must lie in [1, {self.n_terms}]")
        return EigenBasis(
            self.grid,
            self.weights,
            self.eigenvalues[:n_terms],
            self.values[:, :n_terms],
            self.nystrom_coefficients[:n_terms],
            self.base_spec,
        )

    def inner(self, f_values: np.ndarray) -> np.ndarray:
        """Quadrature inner products of grid values with each eigenfunction.

        ``f_values`` may be (M,) or (M, k); the result is (N,) or (N, k).
        """
        f = np.asarray(f_values, dtype=float)
        w = self.weights.reshape((-1,) + (1,) * (f.ndim - 1))
        return self.values.T @ (w * f)


def quadrature_grid(M: int, d: int = 1, seed: int = 0) -> np.ndarray:
    """Midpoint grid for ``d = 1``; seeded uniform Monte Carlo nodes otherwise."""
    if M < 1:
        raise ValueError("grid size must be positive")
    if d == 1:
        return ((np.arange(M) + 0.5) / M).reshape(-1, 1)
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(M, d))


def _decompose(spec: KernelSpec, M: int, N: int, seed: int) -> EigenBasis:
    if not 1 <= N <= M:
        raise ValueError(f"need 1 <= N <= M, got N={N}, M={M}")
    grid = quadrature_grid(M, spec.d, seed)
    weights = np.full(M, 1.0 / M)
    gram = spec(grid, grid)
    gram = 0.5 * (gram + gram.T)
    evals, evecs = eigh(gram / M, subset_by_index=[M - N, M - 1])
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    n_pos = int(np.sum(evals > RANK_TOL))
    if n_pos < N:
        raise RankDeficientBasis(f"only {n_pos} eigenvalues exceed {RANK_TOL:g}, {N} requested")
    # quadrature norm sum_i w_i e(g_i)^2 = 1
    values = evecs * np.sqrt(M)
    signs = np.where(values[0] < 0, -1.0, 1.0)
    values = values * signs
    coefficients = (values * weights[:, None] / evals).T
    for arr in (grid, weights, evals, values, coefficients):
        arr.setflags(write=False)
    return EigenBasis(grid, weights, evals, values, np.ascontiguousarray(coefficients), spec)


@functools.lru_cache(maxsize=32)
def _decompose_cached(spec: KernelSpec, M: int, N: int, seed: int) -> EigenBasis:
    return _decompose(spec, M, N, seed)


def _cache_path(cache_dir, spec, M, N, seed):
    m = str(spec.m).replace("/", "o")
    return os.path.join(cache_dir, f"basis_{spec.family}_m{m}_d{spec.d}_g{spec.length_scale:g}_M{M}_N{N}_s{seed}.npz")


def nystrom_decompose(
    spec: KernelSpec, M: int = DEFAULT_M, N: Optional[int] = None, seed: int = 0, cache_dir: Optional[str] = None
) -> EigenBasis:
    """Nyström eigenpairs of ``spec`` on ``[0, 1]^d``.

    Parameters
    ----------
    spec : KernelSpec
        Matérn kernel to decompose.
    M : int, default=1000
        Number of quadrature nodes.
    N : int, optional
        Number of retained eigenpairs.  Defaults to the standard truncation
        point for ``spec.m`` when one is tabulated, else 12.
    seed : int, default=0
        Seed of the Monte Carlo grid (ignored for ``d = 1``).
    cache_dir : str, optional
        Directory of ``.npz`` files keyed by (family, m, gamma, M, N).

    Returns
    -------
    EigenBasis
    """
    if N is None:
        N = DEFAULT_TRUNCATION.get(spec.m, 12)
    if spec.family != "matern":
        raise ValueError("only Matérn kernels can be decomposed")
    if cache_dir is None:
        return _decompose_cached(spec, int(M), int(N), int(seed))
    path = _cache_path(cache_dir, spec, M, N, seed)
    if os.path.exists(path):
        with np.load(path) as z:
            arrays = {k: z[k] for k in ("grid", "weights", "eigenvalues", "values", "nystrom_coefficients")}
        return EigenBasis(base_spec=spec, **arrays)
    basis = _decompose(spec, int(M), int(N), int(seed))
    os.makedirs(cache_dir, exist_ok=True)
    np.savez(
        path,
        grid=basis.grid,
        weights=basis.weights,
        eigenvalues=basis.eigenvalues,
        values=basis.values,
        nystrom_coefficients=basis.nystrom_coefficients,
    )
    return basis


def nystrom_decompose_all(spec: KernelSpec, M: int = DEFAULT_M, seed: int = 0) -> EigenBasis:
    """Nyström basis keeping every eigenvalue above the rank tolerance."""
    grid = quadrature_grid(M, spec.d, seed)
    gram = spec(grid, grid)
    evals = eigh(0.5 * (gram + gram.T) / M, eigvals_only=True)
    return nystrom_decompose(spec, M, int(np.sum(evals > RANK_TOL)), seed)


def eigen_truncation_error(basis: EigenBasis, test_points=None, beta: float = 1.0, reference=None) -> float:
    """Mean absolute diagonal error of the truncated expansion.

    Computes the mean over ``test_points`` of
    ``|K(s, s) - sum_j gamma_j**beta e_j(s)**2|``.  For ``beta = 1`` the exact
    diagonal of the base kernel is the reference; for other exponents pass a
    larger ``reference`` basis whose full expansion stands in for ``K^beta``.

    Parameters
    ----------
    basis : EigenBasis
    test_points : array-like, optional
        Defaults to 1000 equispaced points on [0, 1].
    beta : float, default=1.0
    reference : EigenBasis, optional

    Returns
    -------
    float
    """
    if test_points is None:
        test_points = np.linspace(0.0, 1.0, 1000)
    pts = as_points(test_points, basis.base_spec.d)
    approx = (basis.eigenfunctions(pts) ** 2) @ basis.eigenvalues**beta
    if reference is None:
        if beta != 1.0:
            raise ValueError("a reference basis is required for beta != 1")
        exact = basis.base_spec.diag(pts)
    else:
        exact = (reference.eigenfunctions(pts) ** 2) @ reference.eigenvalues**beta
    return float(np.mean(np.abs(exact - approx)))


def power_decomposition(m, length_scale: float = 1.0, m_star=None):
    """Base kernel and exponent realizing Sobolev smoothness ``m`` in d = 1.

    Without an explicit ``m_star``, smoothness up to 1 uses the exponential
    kernel (m* = 1) and larger smoothness the order-3/2 Matérn kernel
    (m* = 2).  Returns ``(base_spec, beta)`` with ``beta = m / m*``.
    """
    m = Fraction(m).limit_denominator(1000)
    if m_star is None:
        m_star = 1 if m <= 1 else 2
    m_star = Fraction(m_star)
    if not 0 <= m <= m_star:
        raise ValueError(f"smoothness must lie in [0, {m_star}]")
    return KernelSpec.matern(m_star, 1, length_scale), float(m / m_star)


def sobolev_space_kernel(
    m, length_scale: float = 1.0, M: int = DEFAULT_M, N: Optional[int] = None, m_star=None
) -> KernelSpec:
    """Kernel whose RKHS is equivalent to ``W^m([0, 1])``.

    Orders 1, 2 and 3 map to closed-form Matérn kernels unless ``m_star`` is
    given; other orders are power kernels over a Nyström basis.
    """
    m = Fraction(m).limit_denominator(1000)
    if m_star is None and m in (Fraction(1), Fraction(2), Fraction(3)):
        return KernelSpec.matern(m, 1, length_scale)
    base, beta = power_decomposition(m, length_scale, m_star)
    if N is None:
        N = DEFAULT_TRUNCATION.get(m, 12)
    return KernelSpec.power(nystrom_decompose(base, M, N), beta)
