"""Calibration by minimizing a norm of the estimated discrepancy.

The objective at ``theta`` is the squared norm of
``f_p_hat(x) - f_s(x, theta)`` sampled on a frozen norm design.  Sobolev,
L2 and KO calibration differ only in the :class:`~sobocal.norms.NormSpace`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.stats import qmc
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ModelEvaluationError, OptimizationFailed
from .kernels import KernelSpec
from .norms import DEFAULT_DESIGN_SIZE, DEFAULT_SPECTRAL_TERMS, NormSpace, norm_sq, uniform_design
from .regression import (
    DEFAULT_LAMBDA_GRID,
    DEFAULT_MU_GRID,
    Dataset,
    fit_krr,
    gcv_select_lambda,
    gp_posterior,
    select_mu_validation,
)
from .spectral import DEFAULT_M, nystrom_decompose, power_decomposition

SOBOLEV = "sobolev"
L2 = "l2"
KO = "ko"

DIRECT_ORDERS = (Fraction(1), Fraction(2), Fraction(3))


def parse_mode(mode, m=None, ko_m=2):
    """Normalize a mode label to ``(kind, order)``.

    Accepted labels are ``"sobolev"`` (order from ``m``, default 1),
    ``"sobolev:<m>"``, ``"l2"`` and ``"ko"`` / ``"ko:<m1>"``.  Sobolev order 0
    is reported as L2.
    """
    label = str(mode).strip().lower()
    kind, _, arg = label.partition(":")
    if kind in ("sobolev", "s"):
        order = Fraction(arg) if arg else Fraction(1 if m is None else m).limit_denominator(1000)
        if order == 0:
            return L2, Fraction(0)
        if order < 0:
            raise ValueError("Sobolev order must be nonnegative")
        return SOBOLEV, order
    if kind in ("l2", "L2"):
        return L2, Fraction(0)
    if kind == "ko":
        return KO, Fraction(arg) if arg else Fraction(ko_m)
    raise ValueError(f"unknown calibration mode {mode!r}")


def mode_label(kind, order) -> str:
    return kind if kind == L2 else f"{kind}:{order}"


def build_norm_space(
    mode,
    m=None,
    d: int = 1,
    design_size: int = DEFAULT_DESIGN_SIZE,
    seed: int = 0,
    length_scale: float = 1.0,
    route: str = "matern",
    ko_m=2,
    spectral_terms: int = DEFAULT_SPECTRAL_TERMS,
    M: int = DEFAULT_M,
) -> NormSpace:
    """Norm space for a calibration mode.

    Parameters
    ----------
    mode : str
        See :func:`parse_mode`.
    m : float, optional
        Sobolev order when ``mode`` is a bare ``"sobolev"``.
    d : int, default=1
    design_size : int, default=300
        Number of uniform norm-design points.
    seed : int, default=0
        Seed of the norm design.
    length_scale : float, default=1.0
    route : {"matern", "power"}, default="matern"
        ``"matern"`` uses the closed-form Matérn interpolation norm when the
        order allows it; ``"power"`` always uses the spectral norm of the
        power space over an order-2 base.
    ko_m : float, default=2
        Smoothness of the physical-process kernel used by KO mode.
    spectral_terms : int, default=50
        Truncation of the spectral norm for power spaces.
    M : int, default=1000
        Nyström grid size for power spaces.
    """
    kind, order = parse_mode(mode, m, ko_m)
    design = uniform_design(design_size, d, seed)
    if kind == L2:
        return NormSpace.empirical_l2(design)
    if route == "matern" and (order in DIRECT_ORDERS or kind == KO):
        kernel = KernelSpec.matern(order, d, length_scale)
        return NormSpace.rkhs(kernel, design, seed=seed)
    if route not in ("matern", "power"):
        raise ValueError(f"unknown norm route {route!r}")
    if d != 1:
        raise ValueError("power-space norms are implemented for d = 1 only")
    base, beta = power_decomposition(order, length_scale, None if route == "matern" else 2)
    basis = nystrom_decompose(base, M, min(spectral_terms, M))
    return NormSpace.spectral(basis, beta)


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    """Physical estimate, computer model, parameter box and norm.

    Parameters
    ----------
    physical_model : callable
        ``f_p_hat(x)``, or the exact ``f_p`` when computing true parameters.
    computer_model : callable
        ``f_s(x, theta)`` returning an array shaped like ``x``.
    bounds : array-like of shape (q, 2)
    norm_space : NormSpace
    mode : str, default="sobolev:1"
    gradient : callable, optional
        ``d f_s / d theta`` as ``(x, theta) -> (n, q)`` array.
    """

    physical_model: Callable
    computer_model: Callable
    bounds: np.ndarray
    norm_space: NormSpace
    mode: str = "sobolev:1"
    gradient: Optional[Callable] = None
    physical_values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        if b.shape[1] != 2 or not np.all(np.isfinite(b)) or np.any(b[:, 0] >= b[:, 1]):
            raise ValueError("bounds must be finite (lower, upper) pairs with lower < upper")
        object.__setattr__(self, "bounds", b)
        vals = np.asarray(self.physical_model(self.design_inputs), dtype=float).ravel()
        object.__setattr__(self, "physical_values", vals)

    @property
    def q(self) -> int:
        return len(self.bounds)

    @property
    def design_inputs(self) -> np.ndarray:
        x = self.norm_space.design
        return x[:, 0] if x.shape[1] == 1 else x

    def with_physical(self, physical_model) -> "CalibrationProblem":
        return CalibrationProblem(
            physical_model, self.computer_model, self.bounds, self.norm_space, self.mode, self.gradient
        )

    def with_norm_space(self, norm_space, mode=None) -> "CalibrationProblem":
        return CalibrationProblem(
            self.physical_model, self.computer_model, self.bounds, norm_space, mode or self.mode, self.gradient
        )

    def discrepancy(self, theta, x=None) -> np.ndarray:
        """``f_p_hat(x) - f_s(x, theta)``, on the norm design by default."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if x is None:
            x, fp = self.design_inputs, self.physical_values
        else:
            fp = np.asarray(self.physical_model(x), dtype=float).ravel()
        fs = np.asarray(self.computer_model(x, theta), dtype=float).ravel()
        bad = ~np.isfinite(fs)
        if bad.any():
            xb = np.atleast_1d(x)[int(np.argmax(bad))]
            raise ModelEvaluationError("computer model returned a non-finite value", theta, xb)
        return fp - fs


@dataclass(frozen=True)
class CalibrationResult:
    """Outcome of :func:`calibrate`.

    ``trace`` holds ``evaluations`` (every theta tried), ``restarts``,
    ``iterations`` and ``converged``.
    """

    theta: np.ndarray
    objective: float
    mode: str
    trace: dict
    design_seed: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "theta": [float(t) for t in self.theta],
            "objective": float(self.objective),
            "mode": self.mode,
            "design_seed": self.design_seed,
            "converged": bool(self.trace.get("converged", False)),
            "restarts": int(self.trace.get("restarts", 0)),
            "iterations": int(self.trace.get("iterations", 0)),
            "n_evaluations": len(self.trace.get("evaluations", [])),
        }


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings of the multi-start optimizer.

    Parameters
    ----------
    n_grid : int, default=201
        Coarse scan size for one-dimensional problems.
    n_polish : int, default=3
        Number of best local minima of the scan refined by bounded Brent.
    n_starts : int, default=5
        Latin-hypercube Nelder-Mead starts for ``q > 1``.
    xatol : float, default=1e-6
    maxiter : int, default=500
    seed : int, default=0
    """

    n_grid: int = 201
    n_polish: int = 3
    n_starts: int = 5
    xatol: float = 1e-6
    maxiter: int = 500
    seed: int = 0


def objective(theta, problem: CalibrationProblem) -> float:
    """Squared norm of the discrepancy at ``theta`` on the frozen design."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    span = hi - lo
    if np.any(theta < lo - 1e-9 * span) or np.any(theta > hi + 1e-9 * span):
        raise ValueError(f"theta {theta} lies outside the parameter bounds")
    return norm_sq(problem.discrepancy(theta), problem.norm_space)


class _Recorder:
    def __init__(self, problem):
        self.problem = problem
        self.evaluations = []
        self.failures = 0

    def __call__(self, theta):
        theta = np.clip(np.atleast_1d(np.asarray(theta, dtype=float)), self.problem.bounds[:, 0], self.problem.bounds[:, 1])
        self.evaluations.append(theta.copy())
        return objective(theta, self.problem)


def _local_minima(values, k):
    v = np.asarray(values)
    left = np.r_[np.inf, v[:-1]]
    right = np.r_[v[1:], np.inf]
    idx = np.nonzero((v <= left) & (v <= right) & np.isfinite(v))[0]
    return idx[np.argsort(v[idx], kind="stable")][:k]


def _minimize_1d(problem, rec, n_grid, n_polish, xatol):
    lo, hi = problem.bounds[0]
    grid = np.linspace(lo, hi, n_grid)
    values = []
    for t in grid:
        try:
            values.append(rec([t]))
        except ModelEvaluationError:
            rec.failures += 1
            values.append(np.inf)
    values = np.asarray(values)
    if not np.isfinite(values).any():
        raise OptimizationFailed("objective non-finite on the whole scan", {"evaluations": rec.evaluations})
    best_t, best_v = grid[int(np.argmin(values))], float(np.min(values))
    iterations, converged = 0, True
    for i in _local_minima(values, n_polish):
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
        res = minimize_scalar(lambda t: rec([t]), bounds=(a, b), method="bounded", options={"xatol": xatol * 1e-2})
        iterations += int(res.nfev)
        converged &= bool(res.success)
        if res.fun < best_v:
            best_t, best_v = float(res.x), float(res.fun)
    return np.array([best_t]), best_v, {"restarts": len(_local_minima(values, n_polish)), "iterations": iterations, "converged": converged}


def _minimize_nd(problem, rec, cfg):
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    starts = qmc.scale(qmc.LatinHypercube(d=problem.q, seed=cfg.seed).random(cfg.n_starts), lo, hi)
    best_t, best_v, iterations, converged, ok = None, np.inf, 0, False, 0
    for x0 in starts:
        try:
            start_v = rec(x0)
            res = minimize(
                rec,
                x0,
                method="Nelder-Mead",
                bounds=list(zip(lo, hi)),
                options={"xatol": cfg.xatol, "fatol": 1e-12, "maxiter": cfg.maxiter},
            )
        except ModelEvaluationError:
            rec.failures += 1
            continue
        ok += 1
        iterations += int(res.nit)
        theta, val = np.clip(res.x, lo, hi), float(res.fun)
        if start_v < val:
            theta, val = x0, start_v
        # coordinate polish
        for k in range(problem.q):
            width = max(10 * cfg.xatol, 1e-3 * (hi[k] - lo[k]))
            a, b = max(lo[k], theta[k] - width), min(hi[k], theta[k] + width)

            def along(t, k=k, base=theta.copy()):
                base[k] = t
                return rec(base)

            r = minimize_scalar(along, bounds=(a, b), method="bounded", options={"xatol": cfg.xatol * 1e-2})
            if r.fun < val:
                theta = theta.copy()
                theta[k], val = float(r.x), float(r.fun)
        converged |= bool(res.success)
        if val < best_v:
            best_t, best_v = theta, val
    if ok == 0:
        raise OptimizationFailed("every Nelder-Mead start failed", {"evaluations": rec.evaluations})
    return np.asarray(best_t), best_v, {"restarts": ok, "iterations": iterations, "converged": converged}


def calibrate(problem: CalibrationProblem, config: Optional[OptimizerConfig] = None) -> CalibrationResult:
    """Minimize the calibration objective over the parameter box.

    One-dimensional problems use a coarse grid scan whose best local minima
    are refined by bounded Brent searches; higher-dimensional problems use
    Latin-hypercube multi-start Nelder-Mead with a coordinate-wise polish.

    Parameters
    ----------
    problem : CalibrationProblem
    config : OptimizerConfig, optional

    Returns
    -------
    CalibrationResult
    """
    cfg = config or OptimizerConfig()
    rec = _Recorder(problem)
    mid = problem.bounds.mean(axis=1)
    if not np.isfinite(rec(mid)):
        raise OptimizationFailed("objective is not finite at the centre of the box", {"evaluations": rec.evaluations})
    if problem.q == 1:
        theta, val, info = _minimize_1d(problem, rec, cfg.n_grid, cfg.n_polish, cfg.xatol)
    else:
        theta, val, info = _minimize_nd(problem, rec, cfg)
    info["evaluations"] = [e.tolist() for e in rec.evaluations]
    info["failures"] = rec.failures
    return CalibrationResult(theta, float(val), problem.mode, info, problem.norm_space.seed)


def true_parameter(problem: CalibrationProblem, n_grid: int = 2001) -> np.ndarray:
    """Minimizer of the objective with the exact physical process plugged in."""
    cfg = OptimizerConfig(n_grid=n_grid, n_polish=5, xatol=1e-8)
    return calibrate(problem, cfg).theta


class KrrSurrogate:
    """Kernel ridge emulator of an expensive computer model on ``Omega x Theta``.

    Inputs are rescaled to the unit box; the Matérn order is chosen so that
    ``nu = 3/2`` in the joint dimension.

    Parameters
    ----------
    computer_model : callable
    bounds : array-like of shape (q, 2)
    n_runs : int, default=200
    seed : int, default=0
    d : int, default=1
    """

    def __init__(self, computer_model, bounds, n_runs=200, seed=0, d=1, lambdas=DEFAULT_LAMBDA_GRID):
        bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
        self.bounds = bounds
        self.d = d
        q = len(bounds)
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.0, 1.0, size=(n_runs, d))
        u = rng.uniform(0.0, 1.0, size=(n_runs, q))
        thetas = bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0])
        y = np.array([float(np.ravel(computer_model(xi[0] if d == 1 else xi, t))[0]) for xi, t in zip(x, thetas)])
        joint = np.hstack([x, u])
        kernel = KernelSpec.matern(Fraction(3, 2) + Fraction(d + q, 2), d + q)
        data = Dataset(joint, y)
        self.model = fit_krr(data, kernel, gcv_select_lambda(data, kernel, lambdas))

    def __call__(self, x, theta):
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, 1) if x.ndim == 1 else x
        u = (np.atleast_1d(theta) - self.bounds[:, 0]) / (self.bounds[:, 1] - self.bounds[:, 0])
        return self.model(np.hstack([pts, np.tile(u, (len(pts), 1))]))


def fit_physical(data: Dataset, kind: str = "krr", m=2, length_scale=1.0, lam=None, mu=None, seed=0):
    """Physical-process estimate by GCV-tuned KRR or validated GP."""
    kernel = KernelSpec.matern(m, data.d, length_scale)
    if kind == "krr":
        lam = gcv_select_lambda(data, kernel, DEFAULT_LAMBDA_GRID) if lam is None else lam
        return fit_krr(data, kernel, lam)
    if kind == "gp":
        mu = select_mu_validation(data, kernel, DEFAULT_MU_GRID, 0.3, seed) if mu is None else mu
        return gp_posterior(data, kernel, mu)
    raise ValueError(f"unknown physical estimator {kind!r}")


class SobolevCalibrator(BaseEstimator):
    """Estimator wrapper: fit on physical data, predict with the calibrated model.

    Parameters
    ----------
    computer_model : callable
        ``f_s(x, theta)``.
    bounds : array-like of shape (q, 2)
    mode : str, default="sobolev"
        ``"sobolev"``, ``"l2"`` or ``"ko"``; see :func:`parse_mode`.
    m : float, default=1
        Sobolev order of the norm.
    physical : {"krr", "gp"}, default="krr"
        Estimator of the physical process.
    physical_m : float, default=2
        Smoothness of the physical-process kernel; also the KO order.
    length_scale : float, default=1.0
    route : {"matern", "power"}, default="matern"
    n_design : int, default=300
    design_seed : int, default=0
    random_state : int, default=0
        Seed of the optimizer and of the GP validation split.

    Attributes
    ----------
    theta_ : ndarray of shape (q,)
    result_ : CalibrationResult
    problem_ : CalibrationProblem
    physical_model_ : SurfaceModel
    """

    def __init__(
        self,
        computer_model=None,
        bounds=((-1.0, 1.0),),
        mode="sobolev",
        m=1,
        physical="krr",
        physical_m=2,
        length_scale=1.0,
        route="matern",
        n_design=300,
        design_seed=0,
        random_state=0,
    ):
        self.computer_model = computer_model
        self.bounds = bounds
        self.mode = mode
        self.m = m
        self.physical = physical
        self.physical_m = physical_m
        self.length_scale = length_scale
        self.route = route
        self.n_design = n_design
        self.design_seed = design_seed
        self.random_state = random_state

    def fit(self, X, y, noise_variance=None):
        if self.computer_model is None:
            raise ValueError("computer_model must be provided")
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        data = Dataset(X, y, noise_variance)
        self.physical_model_ = fit_physical(data, self.physical, self.physical_m, self.length_scale, seed=self.random_state)
        kind, order = parse_mode(self.mode, self.m, self.physical_m)
        space = build_norm_space(
            self.mode, self.m, X.shape[1], self.n_design, self.design_seed, self.length_scale, self.route, self.physical_m
        )
        self.problem_ = CalibrationProblem(
            self.physical_model_, self.computer_model, self.bounds, space, mode_label(kind, order)
        )
        self.result_ = calibrate(self.problem_, OptimizerConfig(seed=self.random_state))
        self.theta_ = self.result_.theta
        return self

    def predict(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X)
        x = X[:, 0] if X.shape[1] == 1 else X
        return np.asarray(self.computer_model(x, self.theta_), dtype=float)

    def discrepancy(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X)
        return self.problem_.discrepancy(self.theta_, X[:, 0] if X.shape[1] == 1 else X)
