"""Matérn and power kernels, kernel matrices and a jittered Cholesky.

The Matérn family is parameterized by its Sobolev exponent ``m``; the Bessel
order is ``nu = m - d/2`` and only the closed-form orders 1/2, 3/2 and 5/2 are
supported.  Distances enter as ``r = length_scale * ||x - y||``, so that the
order-1/2 kernel is ``exp(-length_scale * |x - y|)`` with value 1 at zero lag.

Fractional smoothness is obtained through :func:`KernelSpec.power`, the
truncated Mercer expansion of a base kernel with eigenvalues raised to a power
``beta`` in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Optional

import numpy as np
from scipy.linalg import cho_factor
from scipy.spatial.distance import cdist

from .exceptions import InvalidExponent, MissingBasis, NotPositiveDefinite, UnsupportedSmoothness

MATERN = "matern"
POWER = "power"

SUPPORTED_NU = (Fraction(1, 2), Fraction(3, 2), Fraction(5, 2))

DEFAULT_JITTER = 1e-10
MAX_JITTER = 1e-6


def as_points(x, d=None) -> np.ndarray:
    """Coerce scalars, 1-D arrays and (n, d) arrays into an (n, d) float array."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if d in (None, 1) else x.reshape(1, -1)
    if d is not None and x.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got {x.shape[1]}")
    return x


def _matern_closed_form(r: np.ndarray, nu: Fraction) -> np.ndarray:
    if nu == Fraction(1, 2):
        return np.exp(-r)
    if nu == Fraction(3, 2):
        return (1.0 + r) * np.exp(-r)
    return (1.0 + r + r * r / 3.0) * np.exp(-r)


@dataclass(frozen=True)
class KernelSpec:
    """An isotropic Matérn kernel or a power of a Mercer basis.

    Use the :meth:`matern` and :meth:`power` constructors rather than
    instantiating directly.
    """

    family: str
    m: Fraction
    d: int = 1
    length_scale: float = 1.0
    power_base: Optional[Any] = None
    power_exponent: Optional[float] = None

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be a positive integer")
        if not self.length_scale > 0:
            raise ValueError("length_scale must be positive")
        if self.family == MATERN:
            if self.nu not in SUPPORTED_NU:
                raise UnsupportedSmoothness(
                    f"Matérn order nu = m - d/2 = {self.nu} is not supported; "
                    "allowed orders are {1/2, 3/2, 5/2}"
                )
        elif self.family == POWER:
            beta = self.power_exponent
            if beta is None or not 0.0 <= beta <= 1.0:
                raise InvalidExponent(f"power exponent must lie in [0, 1], got {beta}")
            if self.power_base is None or len(self.power_base.eigenvalues) == 0:
                raise MissingBasis("power kernel requires a non-empty eigenbasis")
        else:
            raise ValueError(f"unknown kernel family {self.family!r}")

    @classmethod
    def matern(cls, m, d=1, length_scale=1.0) -> "KernelSpec":
        return cls(MATERN, Fraction(m).limit_denominator(1000), int(d), float(length_scale))

    @classmethod
    def power(cls, basis, beta) -> "KernelSpec":
        base = basis.base_spec
        beta = float(beta)
        m = Fraction(beta).limit_denominator(1000) * base.m
        return cls(POWER, m, base.d, base.length_scale, basis, beta)

    @property
    def nu(self) -> Fraction:
        return self.m - Fraction(self.d, 2)

    def __call__(self, x, y) -> np.ndarray:
        """Cross-kernel matrix between point sets ``x`` (n, d) and ``y`` (k, d)."""
        x = as_points(x, self.d)
        y = as_points(y, self.d)
        if self.family == MATERN:
            r = self.length_scale * cdist(x, y)
            return _matern_closed_form(r, self.nu)
        beta = self.power_exponent
        basis = self.power_base
        ex = basis.eigenfunctions(x)
        ey = ex if y is x else basis.eigenfunctions(y)
        return (ex * basis.eigenvalues**beta) @ ey.T

    def diag(self, x) -> np.ndarray:
        x = as_points(x, self.d)
        if self.family == MATERN:
            return np.ones(len(x))
        ex = self.power_base.eigenfunctions(x)
        return (ex**2) @ (self.power_base.eigenvalues**self.power_exponent)

    def __repr__(self):
        if self.family == MATERN:
            return f"KernelSpec.matern(m={self.m}, d={self.d}, length_scale={self.length_scale})"
        return f"KernelSpec.power(beta={self.power_exponent}, base={self.power_base.base_spec!r})"


def matern_eval(x, y, spec: KernelSpec) -> float:
    """Matérn kernel value between two single points."""
    if spec.family != MATERN:
        raise ValueError("matern_eval requires a Matérn kernel spec")
    return float(spec(as_points(x, spec.d)[:1], as_points(y, spec.d)[:1])[0, 0])


def power_kernel_eval(x, y, spec: KernelSpec) -> float:
    """Truncated power-kernel value ``sum_j gamma_j**beta e_j(x) e_j(y)``."""
    if spec.family != POWER:
        raise ValueError("power_kernel_eval requires a power kernel spec")
    return float(spec(as_points(x, spec.d)[:1], as_points(y, spec.d)[:1])[0, 0])


def stable_cholesky(a: np.ndarray, jitter: float = DEFAULT_JITTER, max_jitter: float = MAX_JITTER):
    """Lower Cholesky factor of ``a + jitter I``, escalating jitter by 10x.

    Returns ``(factor, jitter_used)`` where ``factor`` is the tuple accepted by
    :func:`scipy.linalg.cho_solve`.
    """
    a = np.asarray(a, dtype=float)
    eye = np.eye(a.shape[0])
    current = float(jitter)
    while True:
        try:
            return cho_factor(a + current * eye, lower=True, check_finite=True), current
        except np.linalg.LinAlgError:
            pass
        if current >= max_jitter:
            break
        current = DEFAULT_JITTER if current < DEFAULT_JITTER else min(current * 10.0, max_jitter)
    raise NotPositiveDefinite(f"Cholesky failed even with diagonal jitter {current:g}")


@dataclass(frozen=True)
class KernelMatrix:
    points: np.ndarray
    values: np.ndarray
    jitter: float
    factor: tuple

    @property
    def regularized(self) -> np.ndarray:
        return self.values + self.jitter * np.eye(len(self.values))


def kernel_matrix(points, spec: KernelSpec, jitter: float = DEFAULT_JITTER) -> KernelMatrix:
    """Gram matrix of ``spec`` on ``points`` with a verified Cholesky factor."""
    pts = as_points(points, spec.d)
    if len(pts) == 0:
        raise ValueError("kernel_matrix needs at least one point")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must have finite coordinates")
    values = spec(pts, pts)
    values = 0.5 * (values + values.T)
    factor, used = stable_cholesky(values, jitter)
    return KernelMatrix(pts, values, used, factor)
