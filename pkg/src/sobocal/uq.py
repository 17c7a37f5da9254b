"""Asymptotic uncertainty quantification for calibrated parameters.

The estimator is asymptotically normal with covariance ``4 sigma^2 V^{-1} W
V^{-1} / n``, where ``V`` is minus the Hessian of the calibration objective and
``W = sum_j gamma_j^{-2} (int d f_s / d theta phi_j)^{\\otimes 2}`` is a spectral
sum over the eigenbasis of the norm kernel.  Point-wise bands for the computer
model and the physical process follow by sampling parameters from that normal
law and adding a residual GP band.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve
from scipy.stats import norm as normal

from .calibration import CalibrationProblem, objective
from .exceptions import SingularInformation
from .kernels import KernelSpec
from .models import central_difference_gradient
from .norms import EMPIRICAL_L2, RKHS_INTERP, SPECTRAL
from .regression import DEFAULT_MU_GRID, Dataset, gp_posterior, select_mu_validation
from .spectral import DEFAULT_M, DEFAULT_TRUNCATION, nystrom_decompose, quadrature_grid

HESSIAN_STEP = 1e-3
GRADIENT_STEP = 1e-5
DEFAULT_DRAWS = 100


def _steps(theta, rel):
    return rel * (1.0 + np.abs(theta))


def compute_V(problem: CalibrationProblem, theta, rel_step: float = HESSIAN_STEP) -> np.ndarray:
    """Minus the central-difference Hessian of the objective at ``theta``.

    Steps are ``rel_step * (1 + |theta_k|)``.  The result follows the
    sign convention in which ``V`` is negative definite at a minimum; the
    sandwich covariance does not depend on the sign.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    q = theta.size
    h = _steps(theta, rel_step)
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    if np.any(theta - 2 * h < lo) or np.any(theta + 2 * h > hi):
        raise ValueError("theta must be interior to the bounds by at least two Hessian steps")
    f0 = objective(theta, problem)
    H = np.empty((q, q))
    for i in range(q):
        e_i = np.zeros(q)
        e_i[i] = h[i]
        H[i, i] = (objective(theta + e_i, problem) - 2.0 * f0 + objective(theta - e_i, problem)) / h[i] ** 2
        for j in range(i):
            e_j = np.zeros(q)
            e_j[j] = h[j]
            H[i, j] = (
                objective(theta + e_i + e_j, problem)
                - objective(theta + e_i - e_j, problem)
                - objective(theta - e_i + e_j, problem)
                + objective(theta - e_i - e_j, problem)
            ) / (4.0 * h[i] * h[j])
            H[j, i] = H[i, j]
    V = -0.5 * (H + H.T)
    scale = max(1.0, float(np.abs(V).max())) ** q
    if not np.all(np.isfinite(V)) or abs(np.linalg.det(V)) < 1e-12 * scale:
        raise SingularInformation(f"information matrix is singular at theta = {theta}")
    return V


def _gradient_values(problem, theta, x):
    if problem.gradient is not None:
        G = np.asarray(problem.gradient(x, theta), dtype=float)
    else:
        G = central_difference_gradient(problem.computer_model, x, theta, GRADIENT_STEP)
    return G.reshape(len(x), -1)


def default_basis(problem: CalibrationProblem, M: int = DEFAULT_M, N: Optional[int] = None):
    """Eigenbasis and exponent matching the problem's norm space.

    Returns ``(basis, beta)``, or ``(None, 0.0)`` for the empirical L2 norm.
    """
    space = problem.norm_space
    if space.mode == EMPIRICAL_L2:
        return None, 0.0
    if space.mode == SPECTRAL:
        base = space.basis
        m = base.base_spec.m * space.beta
        n_terms = N or min(DEFAULT_TRUNCATION.get(m, 12), base.n_terms)
        return base.truncate(n_terms), space.beta
    if space.mode == RKHS_INTERP and space.kernel is not None:
        kernel = space.kernel
        return nystrom_decompose(kernel, M, N or DEFAULT_TRUNCATION.get(kernel.m, 12)), 1.0
    raise ValueError("no eigenbasis is available for this norm space")


def compute_W(problem: CalibrationProblem, theta, basis=None, beta: float = 1.0) -> np.ndarray:
    """Spectral sum ``sum_j gamma_j^{-2 beta} c_j c_j^T`` of gradient coefficients.

    ``c_j`` is the quadrature inner product of ``d f_s / d theta`` with the
    j-th eigenfunction.  With no basis (L2 norm) the sum is replaced by its
    ``beta = 0`` limit ``int (d f_s / d theta)^{\\otimes 2}`` on a midpoint grid.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if basis is None:
        x = quadrature_grid(DEFAULT_M)[:, 0]
        G = _gradient_values(problem, theta, x)
        W = G.T @ G / len(x)
    else:
        x = basis.grid[:, 0] if basis.grid.shape[1] == 1 else basis.grid
        G = _gradient_values(problem, theta, x)
        c = basis.inner(G)
        W = (c / basis.eigenvalues[:, None] ** (2.0 * beta)).T @ c
    return 0.5 * (W + W.T)


def sandwich_covariance(V, W, noise_variance: float, n: int) -> np.ndarray:
    """``4 sigma^2 V^{-1} W V^{-1} / n``."""
    V = np.atleast_2d(V)
    try:
        Vinv = np.linalg.inv(V)
    except np.linalg.LinAlgError:
        raise SingularInformation("information matrix is singular") from None
    cov = 4.0 * noise_variance * Vinv @ np.atleast_2d(W) @ Vinv.T / n
    return 0.5 * (cov + cov.T)


def theta_confidence_interval(theta, V, W, noise_variance: float, n: int, level: float = 0.95):
    """Wald intervals ``theta_k -/+ z sqrt(cov_kk)`` from the sandwich covariance.

    Returns
    -------
    intervals : ndarray of shape (q, 2)
    cov : ndarray of shape (q, q)
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    cov = sandwich_covariance(V, W, noise_variance, n)
    half = normal.ppf(0.5 + level / 2.0) * np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return np.column_stack([theta - half, theta + half]), cov


@dataclass(frozen=True)
class Band:
    """Point-wise band on an evaluation grid."""

    target: str
    grid: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float

    def coverage(self, truth) -> float:
        t = np.asarray(truth, dtype=float)
        return float(np.mean((self.lower <= t) & (t <= self.upper)))

    def score(self, truth) -> float:
        return interval_score(self.lower, self.upper, truth, self.level)

    @property
    def mean_width(self) -> float:
        return float(np.mean(self.upper - self.lower))


def confidence_bands(
    problem: CalibrationProblem,
    theta,
    cov,
    data: Dataset,
    l: int = DEFAULT_DRAWS,
    eval_grid=None,
    level: float = 0.95,
    seed=0,
    residual_kernel: Optional[KernelSpec] = None,
    mu: Optional[float] = None,
):
    """Point-wise bands for ``f_s(., theta*)`` and ``f_p`` by parameter sampling.

    Parameters
    ----------
    problem : CalibrationProblem
    theta : array-like of shape (q,)
    cov : array-like of shape (q, q)
        Covariance of the parameter estimate.
    data : Dataset
        Physical observations used to fit the residual GP.
    l : int, default=100
        Number of parameter draws; at least 100.
    eval_grid : array-like, optional
        100 equispaced points on [0, 1] by default.
    level : float, default=0.95
    seed : int or Generator, default=0
    residual_kernel : KernelSpec, optional
        Correlation of the discrepancy GP, Matérn order 3/2 by default.
    mu : float, optional
        Noise ratio of the residual GP; chosen by hold-out validation on the
        residuals at ``theta`` when omitted.

    Returns
    -------
    dict
        ``{"fs": Band, "fp": Band}``.
    """
    if l < 100:
        raise ValueError("at least 100 parameter draws are required")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    grid = np.linspace(0.0, 1.0, 100) if eval_grid is None else np.asarray(eval_grid, dtype=float)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if np.allclose(cov, 0.0):
        draws = np.tile(theta, (l, 1))
    else:
        draws = rng.multivariate_normal(theta, cov, size=l, method="eigh")
        draws = np.clip(draws, problem.bounds[:, 0], problem.bounds[:, 1])
    x_obs = data.inputs[:, 0] if data.d == 1 else data.inputs
    fs_grid = np.array([problem.computer_model(grid, t) for t in draws])
    fs_obs = np.array([problem.computer_model(x_obs, t) for t in draws])
    lo_q, hi_q = 0.5 - level / 2.0, 0.5 + level / 2.0
    band_fs = Band("fs", grid, np.quantile(fs_grid, lo_q, axis=0), np.quantile(fs_grid, hi_q, axis=0), level)

    kernel = residual_kernel or KernelSpec.matern(2)
    resid0 = Dataset(data.inputs, data.responses - problem.computer_model(x_obs, theta), data.noise_variance, domain=data.domain)
    if mu is None:
        mu = select_mu_validation(resid0, kernel, DEFAULT_MU_GRID, 0.3, rng.integers(2**32))
    process_var = data.noise_variance / mu if data.noise_variance else None
    gp = gp_posterior(resid0, kernel, mu, process_var)
    sd = np.sqrt(gp.variance(grid))
    smoother = gp.kernel(grid, gp.inputs)
    # posterior means of every residual draw at once
    means = (smoother @ cho_solve(gp.factor, (data.responses[None, :] - fs_obs).T)).T
    z = normal.ppf(hi_q)
    centre = fs_grid + means
    band_fp = Band("fp", grid, np.quantile(centre - z * sd, lo_q, axis=0), np.quantile(centre + z * sd, hi_q, axis=0), level)
    return {"fs": band_fs, "fp": band_fp}


def interval_score(lower, upper, truth, level: float = 0.95) -> float:
    """Mean proper interval score ``(u - l) + (2/alpha)(l - t)_+ + (2/alpha)(t - u)_+``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    lower, upper, truth = (np.asarray(a, dtype=float) for a in (lower, upper, truth))
    alpha = 1.0 - level
    score = (upper - lower) + (2.0 / alpha) * np.clip(lower - truth, 0.0, None) + (2.0 / alpha) * np.clip(truth - upper, 0.0, None)
    return float(np.mean(score))


@dataclass
class UQReport:
    """Sandwich covariance, parameter intervals and point-wise bands."""

    theta: np.ndarray
    V: np.ndarray
    W: np.ndarray
    covariance: np.ndarray
    intervals: np.ndarray
    level: float
    bands: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)

    def summary(self) -> str:
        lines = [f"level: {self.level}"]
        for k, (t, (a, b)) in enumerate(zip(self.theta, self.intervals)):
            lines.append(f"theta[{k}]: {t:.6g}  interval [{a:.6g}, {b:.6g}]  sd {np.sqrt(self.covariance[k, k]):.6g}")
        lines.append("V: " + np.array2string(self.V, precision=6))
        lines.append("W: " + np.array2string(self.W, precision=6))
        for name, band in self.bands.items():
            lines.append(f"band {name}: mean width {band.mean_width:.6g}")
        for name, s in self.scores.items():
            lines.append(f"score {name}: {s:.6g}")
        return "\n".join(lines)

    def write(self, directory, header: str = "") -> None:
        os.makedirs(directory, exist_ok=True)
        for name, band in self.bands.items():
            write_band_csv(os.path.join(directory, f"bands_{name}.csv"), band, header)
        with open(os.path.join(directory, "uq_summary.txt"), "w", encoding="utf-8") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write(self.summary() + "\n")


def write_band_csv(path, band: Band, header: str = "", truth=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["x", "lower", "upper"] + (["truth"] if truth is not None else []))
        for k, x in enumerate(band.grid):
            row = [f"{x:.10g}", f"{band.lower[k]:.10g}", f"{band.upper[k]:.10g}"]
            if truth is not None:
                row.append(f"{truth[k]:.10g}")
            w.writerow(row)


def run_uq(
    problem: CalibrationProblem,
    theta,
    data: Dataset,
    noise_variance: Optional[float] = None,
    level: float = 0.95,
    basis=None,
    beta=None,
    bands: bool = True,
    l: int = DEFAULT_DRAWS,
    eval_grid=None,
    seed=0,
) -> UQReport:
    """V, W, covariance, intervals and (optionally) bands in one call."""
    sigma2 = data.noise_variance if noise_variance is None else noise_variance
    if sigma2 is None:
        raise ValueError("a noise variance is required for the sandwich covariance")
    if basis is None:
        basis, default_beta = default_basis(problem)
        beta = default_beta if beta is None else beta
    V = compute_V(problem, theta)
    W = compute_W(problem, theta, basis, 1.0 if beta is None else beta)
    intervals, cov = theta_confidence_interval(theta, V, W, sigma2, data.n, level)
    report = UQReport(np.atleast_1d(theta), V, W, cov, intervals, level)
    if bands:
        report.bands = confidence_bands(problem, theta, cov, data, l, eval_grid, level, seed)
    return report
