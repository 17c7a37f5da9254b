"""Norms of functions known pointwise.

A :class:`NormSpace` fixes everything needed to turn function values on a
design into a squared norm: the empirical L2 mean, the RKHS norm of the
minimum-norm interpolant ``g^T R^{-1} g``, the spectral norm
``sum_j <g, e_j>^2 / gamma_j**beta`` of a power space, or an integer-order
Sobolev norm by finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import cho_solve
from scipy.spatial import cKDTree

from .exceptions import ShapeError, UnsupportedOrder
from .kernels import DEFAULT_JITTER, KernelSpec, as_points, stable_cholesky

EMPIRICAL_L2 = "empirical_l2"
RKHS_INTERP = "rkhs_interp"
SOBOLEV_INTEGER = "sobolev_integer"
SPECTRAL = "spectral"

DEFAULT_DESIGN_SIZE = 300
DEFAULT_SPECTRAL_TERMS = 50
SOBOLEV_GRID_SIZE = 500


def uniform_design(N: int = DEFAULT_DESIGN_SIZE, d: int = 1, seed: int = 0) -> np.ndarray:
    """Seeded uniform points on ``[0, 1]^d``, sorted along the first axis."""
    pts = np.random.default_rng(seed).uniform(0.0, 1.0, size=(N, d))
    return pts[np.argsort(pts[:, 0], kind="stable")]


@dataclass(frozen=True, eq=False)
class NormSpace:
    """A frozen recipe for squared norms of sampled functions.

    Build instances with the class-method constructors.  ``design`` holds
    the points at which the function must be sampled before calling
    :func:`norm_sq`.
    """

    mode: str
    design: np.ndarray
    kernel: Optional[KernelSpec] = None
    factor: Optional[tuple] = None
    jitter: float = 0.0
    order: Optional[int] = None
    basis: Optional[object] = None
    beta: Optional[float] = None
    seed: Optional[int] = None

    @classmethod
    def empirical_l2(cls, design) -> "NormSpace":
        return cls(EMPIRICAL_L2, as_points(design))

    @classmethod
    def rkhs(cls, kernel: KernelSpec, design=None, jitter: float = DEFAULT_JITTER, seed: int = 0) -> "NormSpace":
        """Interpolation norm ``g^T R^{-1} g`` on a design (300 uniform points by default)."""
        if design is None:
            design = uniform_design(DEFAULT_DESIGN_SIZE, kernel.d, seed)
        design = as_points(design, kernel.d)
        if len(np.unique(design, axis=0)) != len(design):
            raise ValueError("norm design points must be pairwise distinct")
        gram = kernel(design, design)
        factor, used = stable_cholesky(0.5 * (gram + gram.T), jitter)
        return cls(RKHS_INTERP, design, kernel, factor, used, seed=seed)

    @classmethod
    def from_gram(cls, design, gram, jitter: float = 0.0) -> "NormSpace":
        """Interpolation-type norm with a caller-supplied Gram matrix."""
        design = as_points(design)
        gram = np.asarray(gram, dtype=float)
        if gram.shape != (len(design), len(design)):
            raise ShapeError("Gram matrix does not match the design")
        factor, used = stable_cholesky(gram, jitter)
        return cls(RKHS_INTERP, design, None, factor, used)

    @classmethod
    def spectral(cls, basis, beta: float = 1.0) -> "NormSpace":
        """Truncated Mercer norm of the ``beta`` power space, sampled on the basis grid."""
        return cls(SPECTRAL, basis.grid, basis=basis, beta=float(beta))

    @classmethod
    def sobolev_integer(cls, m: int, n_grid: int = SOBOLEV_GRID_SIZE) -> "NormSpace":
        if m not in (0, 1, 2):
            raise UnsupportedOrder(f"integer Sobolev order must be 0, 1 or 2, got {m}")
        return cls(SOBOLEV_INTEGER, np.linspace(0.0, 1.0, n_grid).reshape(-1, 1), order=int(m))

    @classmethod
    def for_kernel(cls, kernel: KernelSpec, design=None, seed: int = 0, jitter: float = DEFAULT_JITTER):
        """Interpolation norm for Matérn kernels, spectral norm for power kernels."""
        if kernel.family == "power":
            return cls.spectral(kernel.power_base, kernel.power_exponent)
        return cls.rkhs(kernel, design, jitter, seed)

    @property
    def size(self) -> int:
        return len(self.design)

    def evaluate(self, f) -> float:
        """Squared norm of a callable ``f`` sampled on the design."""
        x = self.design[:, 0] if self.design.shape[1] == 1 else self.design
        return norm_sq(np.asarray(f(x), dtype=float), self)


def norm_sq(values, space: NormSpace) -> float:
    """Squared norm of a function from its values on ``space.design``.

    Parameters
    ----------
    values : array-like of shape (N,)
    space : NormSpace

    Returns
    -------
    float
        Nonnegative squared norm.
    """
    g = np.asarray(values, dtype=float)
    if g.ndim != 1 or len(g) != space.size:
        raise ShapeError(f"expected {space.size} values, got shape {g.shape}")
    if space.mode == EMPIRICAL_L2:
        return float(np.mean(g * g))
    if space.mode == RKHS_INTERP:
        return float(max(g @ cho_solve(space.factor, g), 0.0))
    if space.mode == SPECTRAL:
        basis = space.basis
        c = basis.inner(g)
        return float(np.sum(c * c / basis.eigenvalues**space.beta))
    return _sobolev_from_values(g, space.design[:, 0], space.order)


def _sobolev_from_values(g, grid, m):
    total = trapezoid(g * g, grid)
    deriv = g
    for _ in range(m):
        deriv = np.gradient(deriv, grid, edge_order=2)
        total += trapezoid(deriv * deriv, grid)
    return float(total)


def sobolev_integer_norm_sq(f, m: int, grid=None) -> float:
    """``sum_{k<=m} int (f^(k))^2`` by second-order finite differences.

    Parameters
    ----------
    f : callable or array-like
        Function on ``[0, 1]`` or its values on ``grid``.
    m : int
        Order, one of 0, 1, 2.
    grid : array-like, optional
        Equispaced grid with at least 200 points, 500 on [0, 1] by default.
    """
    if m not in (0, 1, 2):
        raise UnsupportedOrder(f"integer Sobolev order must be 0, 1 or 2, got {m}")
    grid = np.linspace(0.0, 1.0, SOBOLEV_GRID_SIZE) if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1:
        raise UnsupportedOrder("integer Sobolev norms are implemented for d = 1 only")
    if len(grid) < 200:
        raise ValueError("derivative grid needs at least 200 points")
    steps = np.diff(grid)
    if not np.allclose(steps, steps[0], rtol=1e-8, atol=0):
        raise ValueError("derivative grid must be equispaced")
    g = np.asarray(f(grid) if callable(f) else f, dtype=float)
    return _sobolev_from_values(g, grid, m)


def interpolant_norm_bound(space: NormSpace, probe_grid) -> float:
    """Max over probes of ``sqrt(K(x, x) - K(x, nearest design point))``.

    A power-function style diagnostic; small values certify that the design
    resolves the kernel well enough for the interpolation norm.
    """
    if space.mode != RKHS_INTERP or space.kernel is None:
        raise ValueError("interpolant_norm_bound needs an RKHS interpolation space with a kernel")
    probes = as_points(probe_grid, space.kernel.d)
    _, idx = cKDTree(space.design).query(probes)
    near = np.concatenate(
        [
            space.kernel(probes[i : i + 500], space.design[idx[i : i + 500]]).diagonal()
            for i in range(0, len(probes), 500)
        ]
    )
    gap = np.clip(space.kernel.diag(probes) - near, 0.0, None)
    return float(np.sqrt(gap).max())


def eigenfunction_norm_contrast(basis, c: float = 10.0, design=None):
    """Two unit-L2 eigenfunctions whose RKHS norms differ by more than ``c``.

    Returns a dict with the quadrature L2 norms of ``e_1`` and ``e_k``, the
    spectral ratio ``sqrt(gamma_1 / gamma_k)``, the same ratio measured by the
    interpolation norm on ``design``, and ``k``: the first index where the
    spectral ratio exceeds ``c``.
    """
    ratios = np.sqrt(basis.eigenvalues[0] / basis.eigenvalues)
    above = np.nonzero(ratios > c)[0]
    if above.size == 0:
        raise ValueError(f"no eigenfunction within the basis has norm ratio above {c}")
    k = int(above[0])
    l2 = np.sqrt(basis.weights @ (basis.values[:, [0, k]] ** 2))
    design = uniform_design(DEFAULT_DESIGN_SIZE, basis.base_spec.d, 0) if design is None else design
    space = NormSpace.rkhs(basis.base_spec, design)
    e = basis.eigenfunctions(space.design)
    interp = np.sqrt(norm_sq(e[:, k], space) / norm_sq(e[:, 0], space))
    return {"k": k + 1, "l2_first": float(l2[0]), "l2_k": float(l2[1]), "ratio": float(ratios[k]), "interp_ratio": float(interp)}
