"""Estimators of the physical process.

Kernel ridge regression covers deterministic physical processes observed with
noise, and the Gaussian process posterior mean covers the stochastic case.  Both
share the representer form ``f(x) = r(x)^T (R + s I)^{-1} y`` and differ only in
how the ridge ``s`` is parameterized: ``s = n * lam`` for KRR and ``s = mu`` for
the GP.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, eigh
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import DatasetError, SelectionFailed
from .kernels import KernelSpec, as_points, stable_cholesky

KRR = "krr"
GP = "gp"

DEFAULT_LAMBDA_GRID = np.logspace(-8, 0, 30)
DEFAULT_MU_GRID = np.logspace(-4, 1, 21)
VARIANCE_TOL = 1e-10


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Noisy physical observations ``y_j = f_p(x_j) + eps_j``.

    Parameters
    ----------
    inputs : ndarray of shape (n, d)
    responses : ndarray of shape (n,)
    noise_variance : float, optional
        Known noise variance, if any.
    seed : int, optional
        Seed used when the data were simulated.
    domain : tuple of ndarray, optional
        Lower and upper corners of the input box, ``[0, 1]^d`` by default.
    """

    inputs: np.ndarray
    responses: np.ndarray
    noise_variance: Optional[float] = None
    seed: Optional[int] = None
    domain: Optional[tuple] = None

    def __post_init__(self):
        if np.size(self.responses) < 2:
            raise DatasetError("dataset requires at least 2 rows")
        x = as_points(self.inputs)
        y = np.asarray(self.responses, dtype=float).ravel()
        if len(x) != len(y):
            raise DatasetError(f"{len(x)} inputs but {len(y)} responses")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DatasetError("inputs and responses must be finite")
        lo, hi = self.domain if self.domain is not None else (np.zeros(x.shape[1]), np.ones(x.shape[1]))
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (x.shape[1],))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (x.shape[1],))
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            raise DatasetError("inputs fall outside the domain")
        if self.noise_variance is not None and not self.noise_variance >= 0:
            raise DatasetError("noise variance must be nonnegative")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "domain", (lo.copy(), hi.copy()))

    @property
    def n(self) -> int:
        return len(self.responses)

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.responses[idx], self.noise_variance, self.seed, self.domain)

    def to_csv(self, path, header_lines: Sequence[str] = ()) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow([f"x{k + 1}" for k in range(self.d)] + ["y"])
            for xi, yi in zip(self.inputs, self.responses):
                writer.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])

    @classmethod
    def from_csv(cls, path, noise_variance=None, domain=None, columns=None) -> "Dataset":
        """Read a dataset with header ``x1,...,xd,y``.

        Lines starting with ``#`` are skipped.  ``columns`` optionally names
        the input and response columns, e.g. ``(["log_time"], "normalized_current")``.
        """
        rows, header, header_line = [], None, None
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                if raw.startswith("#") or not raw.strip():
                    continue
                cells = next(csv.reader([raw]))
                if header is None:
                    header, header_line = [c.strip() for c in cells], lineno
                    continue
                if len(cells) != len(header):
                    raise DatasetError(f"expected {len(header)} fields, got {len(cells)}", line=lineno)
                try:
                    rows.append([float(c) for c in cells])
                except ValueError:
                    raise DatasetError(f"non-numeric field in {cells!r}", line=lineno) from None
        if header is None:
            raise DatasetError("dataset requires at least 2 rows")
        if columns is None:
            x_names = [f"x{k + 1}" for k in range(len(header) - 1)]
            y_name = "y"
        else:
            x_names, y_name = list(columns[0]), columns[1]
        if header != x_names + [y_name]:
            raise DatasetError(f"header must be {','.join(x_names + [y_name])}", line=header_line)
        if len(rows) < 2:
            raise DatasetError("dataset requires at least 2 rows")
        arr = np.asarray(rows)
        return cls(arr[:, :-1], arr[:, -1], noise_variance, None, domain)


def simulate_dataset(f, n: int, noise_variance: float, seed, d: int = 1) -> Dataset:
    """Uniform design on ``[0, 1]^d`` with Gaussian noise added to ``f``."""
    rng = _rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, d))
    y = np.asarray(f(x[:, 0] if d == 1 else x), dtype=float) + rng.normal(0.0, np.sqrt(noise_variance), n)
    return Dataset(x, y, noise_variance, seed if isinstance(seed, (int, np.integer)) else None)


@dataclass(frozen=True, eq=False)
class SurfaceModel:
    """Fitted representer-form estimate ``x -> r(x)^T coefficients``.

    ``regularizer`` is ``lam`` for KRR and ``mu`` for the GP posterior.
    """

    kind: str
    kernel: KernelSpec
    coefficients: np.ndarray
    regularizer: float
    inputs: np.ndarray
    rkhs_norm: float
    factor: tuple = field(repr=False, default=None)
    process_variance: Optional[float] = None

    def __call__(self, x) -> np.ndarray:
        return self.kernel(as_points(x, self.kernel.d), self.inputs) @ self.coefficients

    predict = __call__

    @property
    def ridge(self) -> float:
        return self.regularizer * len(self.inputs) if self.kind == KRR else self.regularizer

    def variance(self, x) -> np.ndarray:
        """Posterior variance ``sigma^2 (K(x, x) - r^T (R + mu I)^{-1} r)``."""
        if self.kind != GP:
            raise ValueError("posterior variance is only defined for GP models")
        x = as_points(x, self.kernel.d)
        r = self.kernel(x, self.inputs)
        reduction = np.einsum("ij,ji->i", r, cho_solve(self.factor, r.T))
        var = self.process_variance * (self.kernel.diag(x) - reduction)
        if np.any(var < -VARIANCE_TOL * max(self.process_variance, 1.0)):
            raise ArithmeticError("posterior variance is materially negative")
        return np.maximum(var, 0.0)


def _representer_fit(data: Dataset, kernel: KernelSpec, ridge: float):
    R = kernel(data.inputs, data.inputs)
    R = 0.5 * (R + R.T)
    factor, _ = stable_cholesky(R + ridge * np.eye(data.n), jitter=0.0)
    alpha = cho_solve(factor, data.responses)
    norm = float(np.sqrt(max(alpha @ R @ alpha, 0.0)))
    return alpha, factor, norm


def fit_krr(data: Dataset, kernel: KernelSpec, lam: float) -> SurfaceModel:
    """Kernel ridge regression ``f(x) = r(x)^T (R + n lam I)^{-1} y``.

    Parameters
    ----------
    data : Dataset
    kernel : KernelSpec
    lam : float
        Positive ridge parameter.

    Returns
    -------
    SurfaceModel
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    alpha, factor, norm = _representer_fit(data, kernel, data.n * lam)
    return SurfaceModel(KRR, kernel, alpha, float(lam), data.inputs, norm, factor)


def gcv_scores(data: Dataset, kernel: KernelSpec, lam_grid) -> np.ndarray:
    """GCV criterion ``(1/n)||(I - A)y||^2 / [(1/n) tr(I - A)]^2`` for each ``lam``."""
    n = data.n
    R = kernel(data.inputs, data.inputs)
    evals, evecs = eigh(0.5 * (R + R.T))
    evals = np.clip(evals, 0.0, None)
    proj = evecs.T @ data.responses
    scores = []
    for lam in np.asarray(lam_grid, dtype=float):
        shrink = n * lam / (evals + n * lam)
        resid = np.sum((shrink * proj) ** 2) / n
        scores.append(resid / (np.sum(shrink) / n) ** 2)
    return np.asarray(scores)


def gcv_select_lambda(data: Dataset, kernel: KernelSpec, lam_grid=DEFAULT_LAMBDA_GRID) -> float:
    """Grid minimizer of the GCV criterion, ties resolved toward larger ``lam``."""
    lam_grid = np.asarray(lam_grid, dtype=float)
    if lam_grid.size == 0:
        raise SelectionFailed("lambda grid is empty")
    scores = gcv_scores(data, kernel, lam_grid)
    finite = np.isfinite(scores)
    if not finite.any():
        raise SelectionFailed("GCV is non-finite for every lambda")
    best = np.min(scores[finite])
    ties = finite & (scores <= best * (1.0 + 1e-10) + 1e-300)
    return float(np.max(lam_grid[ties]))


def estimate_noise_variance(data: Dataset, kernel: KernelSpec, lam: float) -> float:
    """Residual variance ``||(I - A)y||^2 / tr(I - A)`` of a KRR fit."""
    n = data.n
    R = kernel(data.inputs, data.inputs)
    evals, evecs = eigh(0.5 * (R + R.T))
    shrink = n * lam / (np.clip(evals, 0.0, None) + n * lam)
    proj = evecs.T @ data.responses
    return float(np.sum((shrink * proj) ** 2) / np.sum(shrink))


def gp_posterior(data: Dataset, kernel: KernelSpec, mu: float, process_variance: Optional[float] = None) -> SurfaceModel:
    """Zero-mean GP posterior with correlation ``kernel`` and noise ratio ``mu``.

    If ``process_variance`` is not given it is set to its profile maximum
    likelihood value ``y^T (R + mu I)^{-1} y / n``.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    alpha, factor, norm = _representer_fit(data, kernel, mu)
    if process_variance is None:
        process_variance = float(data.responses @ alpha / data.n)
    return SurfaceModel(GP, kernel, alpha, float(mu), data.inputs, norm, factor, float(process_variance))


def select_mu_validation(data: Dataset, kernel: KernelSpec, mu_grid=DEFAULT_MU_GRID, holdout_fraction=0.3, seed=0):
    """Noise ratio minimizing hold-out MSE of the posterior mean."""
    mu_grid = np.asarray(mu_grid, dtype=float)
    if mu_grid.size == 0:
        raise SelectionFailed("mu grid is empty")
    if not 0 < holdout_fraction <= 0.5:
        raise ValueError("holdout_fraction must lie in (0, 0.5]")
    if mu_grid.size == 1:
        return float(mu_grid[0])
    perm = _rng(seed).permutation(data.n)
    n_val = max(1, int(round(holdout_fraction * data.n)))
    val, train = data.subset(perm[:n_val]), data.subset(perm[n_val:])
    errors = []
    for mu in mu_grid:
        try:
            pred = gp_posterior(train, kernel, mu, 1.0)(val.inputs)
            errors.append(np.mean((pred - val.responses) ** 2))
        except (ValueError, ArithmeticError):
            errors.append(np.inf)
    errors = np.asarray(errors)
    if not np.isfinite(errors).any():
        raise SelectionFailed("validation error is non-finite for every mu")
    return float(mu_grid[int(np.argmin(errors))])


@dataclass(frozen=True, eq=False)
class GaussianPath:
    """A sampled process on a 1-D grid, linearly interpolated elsewhere."""

    grid: np.ndarray
    values: np.ndarray

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = x[..., 0] if x.ndim == 2 else x
        return np.interp(flat, self.grid, self.values)


def sample_gp_path(kernel: KernelSpec, mean_fn: Callable, grid, variance: float, seed) -> GaussianPath:
    """Draw ``mean_fn(grid) + L z`` with ``L L^T = variance K(grid, grid) + jitter``."""
    grid = np.asarray(grid, dtype=float).ravel()
    mean = np.asarray(mean_fn(grid), dtype=float)
    if variance == 0:
        return GaussianPath(grid, mean)
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    factor, _ = stable_cholesky(variance * kernel(grid, grid))
    lower = np.tril(factor[0])
    z = _rng(seed).standard_normal(len(grid))
    return GaussianPath(grid, mean + lower @ z)


class KernelRidgeGCV(RegressorMixin, BaseEstimator):
    """Matérn kernel ridge regression with the penalty chosen by GCV.

    Parameters
    ----------
    m : float, default=2
        Sobolev smoothness of the Matérn kernel (``nu = m - d/2``).
    length_scale : float, default=1.0
        Input scaling ``gamma`` in ``r = gamma * ||x - y||``.
    lambdas : array-like, optional
        Candidate penalties, 30 log-spaced values in [1e-8, 1] by default.

    Attributes
    ----------
    alpha_ : float
        Selected penalty.
    model_ : SurfaceModel
    """

    def __init__(self, m=2, length_scale=1.0, lambdas=None):
        self.m = m
        self.length_scale = length_scale
        self.lambdas = lambdas

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        kernel = KernelSpec.matern(self.m, X.shape[1], self.length_scale)
        data = Dataset(X, y, domain=(X.min(axis=0), X.max(axis=0)))
        grid = DEFAULT_LAMBDA_GRID if self.lambdas is None else self.lambdas
        self.alpha_ = gcv_select_lambda(data, kernel, grid)
        self.model_ = fit_krr(data, kernel, self.alpha_)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_(check_array(X))


class GaussianProcessRegressor(RegressorMixin, BaseEstimator):
    """Zero-mean Matérn GP with the noise ratio chosen on a hold-out split.

    Parameters
    ----------
    m : float, default=2
        Sobolev smoothness of the correlation function.
    length_scale : float, default=1.0
    mu : float, optional
        Fixed noise ratio; selected by validation when omitted.
    mu_grid : array-like, optional
    holdout_fraction : float, default=0.3
    random_state : int, default=0
    """

    def __init__(self, m=2, length_scale=1.0, mu=None, mu_grid=None, holdout_fraction=0.3, random_state=0):
        self.m = m
        self.length_scale = length_scale
        self.mu = mu
        self.mu_grid = mu_grid
        self.holdout_fraction = holdout_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        kernel = KernelSpec.matern(self.m, X.shape[1], self.length_scale)
        data = Dataset(X, y, domain=(X.min(axis=0), X.max(axis=0)))
        if self.mu is None:
            grid = DEFAULT_MU_GRID if self.mu_grid is None else self.mu_grid
            self.mu_ = select_mu_validation(data, kernel, grid, self.holdout_fraction, self.random_state)
        else:
            self.mu_ = float(self.mu)
        self.model_ = gp_posterior(data, kernel, self.mu_)
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "model_")
        X = check_array(X)
        mean = self.model_(X)
        if return_std:
            return mean, np.sqrt(self.model_.variance(X))
        return mean
