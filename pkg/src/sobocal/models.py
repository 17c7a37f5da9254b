"""Built-in physical processes and computer models.

Computer models follow the signature ``f_s(x, theta)`` with ``x`` an array of
inputs and ``theta`` a length-q parameter vector (a scalar is accepted when
``q = 1``).  Gradients return an array of shape ``(len(x), q)``.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass, field
from math import factorial
from typing import Callable, Optional

import numpy as np

from .exceptions import ModelEvaluationError
from .kernels import KernelSpec
from .regression import sample_gp_path

TWO_PI = 2.0 * np.pi


def _scalar(theta) -> float:
    return float(np.ravel(np.asarray(theta, dtype=float))[0])


def physical_mean(x):
    """``exp(pi x / 5) sin(2 pi x)``."""
    x = np.asarray(x, dtype=float)
    return np.exp(np.pi * x / 5.0) * np.sin(TWO_PI * x)


def _root(t):
    # sqrt(t^2 - t + 1) and its derivative
    s = np.sqrt(t * t - t + 1.0)
    return s, (2.0 * t - 1.0) / (2.0 * s)


# Example 1 ---------------------------------------------------------------

EXAMPLE1_FREQUENCY_READINGS = ("exp(t^2+t)", "exp(t^2)+t")
EXAMPLE1_DENOMINATOR_READINGS = ("2exp(t^2)+1", "2exp(t^2+1)")


def _example1_terms(t, frequency, denominator):
    if frequency == "exp(t^2+t)":
        scale = np.exp(t * t + t)
        dscale = (2.0 * t + 1.0) * scale
    elif frequency == "exp(t^2)+t":
        scale = np.exp(t * t) + t
        dscale = 2.0 * t * np.exp(t * t) + 1.0
    else:
        raise ValueError(f"unknown frequency reading {frequency!r}")
    if denominator == "2exp(t^2)+1":
        den = 2.0 * np.exp(t * t) + 1.0
        dden = 4.0 * t * np.exp(t * t)
    elif denominator == "2exp(t^2+1)":
        den = 2.0 * np.exp(t * t + 1.0)
        dden = 4.0 * t * np.exp(t * t + 1.0)
    else:
        raise ValueError(f"unknown denominator reading {denominator!r}")
    return scale, dscale, den, dden


def example1(x, theta, frequency="exp(t^2+t)", denominator="2exp(t^2)+1"):
    """Example 1 computer model.

    ``f_p(x) - sqrt(t^2 - t + 1)/5 * (sin(20 pi x / a(t)) + cos(20 pi x) / b(t) + t^2)``
    where the readings of ``a`` and ``b`` are selectable; the defaults are
    ``a = exp(t^2 + t)`` and ``b = 2 exp(t^2) + 1``.
    """
    x = np.asarray(x, dtype=float)
    t = _scalar(theta)
    s, _ = _root(t)
    scale, _, den, _ = _example1_terms(t, frequency, denominator)
    bracket = np.sin(10.0 * TWO_PI * x / scale) + np.cos(10.0 * TWO_PI * x) / den + t * t
    return physical_mean(x) - 0.2 * s * bracket


def example1_gradient(x, theta, frequency="exp(t^2+t)", denominator="2exp(t^2)+1"):
    x = np.asarray(x, dtype=float)
    t = _scalar(theta)
    s, ds = _root(t)
    scale, dscale, den, dden = _example1_terms(t, frequency, denominator)
    arg = 10.0 * TWO_PI * x / scale
    bracket = np.sin(arg) + np.cos(10.0 * TWO_PI * x) / den + t * t
    dbracket = -np.cos(arg) * arg * dscale / scale - np.cos(10.0 * TWO_PI * x) * dden / den**2 + 2.0 * t
    return (-0.2 * (ds * bracket + s * dbracket)).reshape(-1, 1)


# Example 2 and the supplementary example ---------------------------------


def example_c3(x, theta):
    """``f_p(x) - sqrt(t^2 - t + 1) (sin(2 pi t x) + exp(pi t x / 2))``."""
    x = np.asarray(x, dtype=float)
    t = _scalar(theta)
    s, _ = _root(t)
    return physical_mean(x) - s * (np.sin(TWO_PI * t * x) + np.exp(np.pi * t * x / 2.0))


def example_c3_gradient(x, theta):
    x = np.asarray(x, dtype=float)
    t = _scalar(theta)
    s, ds = _root(t)
    inner = np.sin(TWO_PI * t * x) + np.exp(np.pi * t * x / 2.0)
    dinner = TWO_PI * x * np.cos(TWO_PI * t * x) + (np.pi * x / 2.0) * np.exp(np.pi * t * x / 2.0)
    return (-(ds * inner + s * dinner)).reshape(-1, 1)


def example2(x, theta):
    """Example 2 computer model; same form as :func:`example_c3` around the GP mean."""
    return example_c3(x, theta)


example2_gradient = example_c3_gradient


# Ion channel -------------------------------------------------------------

PADE_ORDER = 6
PADE_COEFFICIENTS = np.array(
    [
        factorial(2 * PADE_ORDER - k) * factorial(PADE_ORDER) / (factorial(2 * PADE_ORDER) * factorial(k) * factorial(PADE_ORDER - k))
        for k in range(PADE_ORDER + 1)
    ]
)
SCALING_TARGET = 0.5


def ion_channel_matrix(theta) -> np.ndarray:
    """The 4 x 4 rate matrix ``A(theta)`` of the Markov model."""
    t1, t2, t3 = np.asarray(theta, dtype=float).ravel()[:3]
    A = np.zeros((4, 4))
    A[0, 0] = -t2 - t3
    A[0, 1] = t1
    A[1, 0] = t2
    A[1, 1] = -t1 - t2
    A[1, 2] = t1
    A[2, 1] = t2
    A[2, 2] = -t1 - t2
    A[2, 3] = t1
    A[3, 2] = t2
    A[3, 3] = -t1
    return A


def expm_pade(X) -> np.ndarray:
    """Matrix exponential by order-6 Padé approximation with scaling and squaring.

    ``X`` may be a single square matrix or a stack of shape ``(k, n, n)``.
    Each matrix is scaled by ``2**-s`` with ``s`` the smallest integer giving
    ``||X||_1 / 2**s <= 0.5``, then squared ``s`` times.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    X = X[None] if single else X
    norms = np.abs(X).sum(axis=1).max(axis=1)
    with np.errstate(divide="ignore"):
        s = np.where(norms > SCALING_TARGET, np.ceil(np.log2(norms / SCALING_TARGET)), 0).astype(int)
    Y = X / (2.0 ** s)[:, None, None]
    eye = np.broadcast_to(np.eye(X.shape[-1]), X.shape)
    power = eye.copy()
    num = PADE_COEFFICIENTS[0] * eye
    den = PADE_COEFFICIENTS[0] * eye
    for k in range(1, PADE_ORDER + 1):
        power = power @ Y
        num = num + PADE_COEFFICIENTS[k] * power
        den = den + (-1) ** k * PADE_COEFFICIENTS[k] * power
    R = np.linalg.solve(den, num)
    for k in range(int(s.max(initial=0))):
        sel = s > k
        R[sel] = R[sel] @ R[sel]
    return R[0] if single else R


def ion_channel(x, theta):
    """``e_1^T expm(exp(x) A(theta)) e_4`` at each log-time ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != 3 or np.any(theta <= 0):
        raise ModelEvaluationError("ion-channel rates must be three positive numbers", theta, None)
    A = ion_channel_matrix(theta)
    with np.errstate(over="ignore", invalid="ignore"):
        E = expm_pade(np.exp(x)[:, None, None] * A)
    out = E[:, 0, 3]
    bad = ~np.isfinite(out)
    if bad.any():
        raise ModelEvaluationError("matrix exponential overflowed", theta, float(x[np.argmax(bad)]))
    return out


ION_CHANNEL_SYNTHETIC_THETA = (1.2, 0.9, 0.06)
ION_CHANNEL_LOG_TIMES = np.linspace(-3.0, 3.0, 19)


def ion_channel_fixture(seed: int = 0, noise_sd: float = 0.01, theta=ION_CHANNEL_SYNTHETIC_THETA):
    """Synthetic stand-in for the 19 normalized current records.

    Returns ``(log_time, normalized_current)`` generated from the Markov
    model at ``theta`` with a smooth model-form perturbation and Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    x = ION_CHANNEL_LOG_TIMES.copy()
    clean = ion_channel(x, theta)
    y = clean * (1.0 + 0.05 * np.tanh(x)) + rng.normal(0.0, noise_sd, len(x))
    return x, y


def write_ion_channel_csv(path, seed: int = 0) -> None:
    x, y = ion_channel_fixture(seed)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("log_time,normalized_current\n")
        for a, b in zip(x, y):
            fh.write(f"{float(a)!r},{float(b)!r}\n")


# Registry ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExperimentModel:
    """A physical truth paired with a computer model.

    Parameters
    ----------
    name : str
    computer_model : callable
    bounds : tuple of (float, float)
        Default parameter box, one pair per coordinate.
    physical_truth : callable, optional
        Deterministic ``f_p``; ``None`` when the truth is a GP draw.
    gradient : callable, optional
    domain : tuple, default=(0.0, 1.0)
    gp_truth : dict, optional
        ``mean``, ``variance``, ``kernel`` and ``grid_size`` of a GP truth.
    """

    name: str
    computer_model: Callable
    bounds: tuple
    physical_truth: Optional[Callable] = None
    gradient: Optional[Callable] = None
    domain: tuple = (0.0, 1.0)
    gp_truth: Optional[dict] = field(default=None)

    @property
    def stochastic(self) -> bool:
        return self.gp_truth is not None

    def sample_truth(self, seed):
        """The physical process for one trial; a GP draw when stochastic."""
        if not self.stochastic:
            return self.physical_truth
        g = self.gp_truth
        grid = np.linspace(self.domain[0], self.domain[1], g["grid_size"])
        return sample_gp_path(g["kernel"], g["mean"], grid, g["variance"], seed)


def _example1_model(frequency="exp(t^2+t)", denominator="2exp(t^2)+1"):
    def fs(x, theta):
        return example1(x, theta, frequency, denominator)

    def grad(x, theta):
        return example1_gradient(x, theta, frequency, denominator)

    return ExperimentModel("example1", fs, ((-1.0, 3.0),), physical_mean, grad)


MODELS = {
    "example1": _example1_model(),
    "example2": ExperimentModel(
        "example2",
        example2,
        ((-1.0, 2.0),),
        None,
        example2_gradient,
        gp_truth={"mean": physical_mean, "variance": 0.1, "kernel": KernelSpec.matern(2), "grid_size": 501},
    ),
    "example_c3": ExperimentModel("example_c3", example_c3, ((-1.0, 1.0),), physical_mean, example_c3_gradient),
    "ion_channel": ExperimentModel(
        "ion_channel", ion_channel, ((0.01, 5.0), (0.01, 5.0), (0.001, 1.0)), None, None, (-3.0, 3.0)
    ),
}


def get_model(name: str, **options) -> ExperimentModel:
    """Look up a built-in model, or load ``module:function`` returning one.

    ``example1`` accepts ``frequency`` and ``denominator`` options selecting
    the reading of its formula.
    """
    if name == "example1" and options:
        return _example1_model(**options)
    if name in MODELS:
        return MODELS[name]
    if ":" in name:
        module, _, attr = name.partition(":")
        obj = getattr(importlib.import_module(module), attr)
        if isinstance(obj, ExperimentModel):
            return obj
        model = obj(**options) if options else obj()
        if not isinstance(model, ExperimentModel):
            raise TypeError(f"{name} did not return an ExperimentModel")
        return model
    raise KeyError(f"unknown model {name!r}; built-ins are {sorted(MODELS)}")


def central_difference_gradient(f, x, theta, rel_step=1e-5):
    """``d f / d theta`` by central differences with step ``rel_step (1 + |theta_k|)``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    cols = []
    for k in range(theta.size):
        h = rel_step * (1.0 + abs(theta[k]))
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        cols.append((np.asarray(f(x, up)) - np.asarray(f(x, dn))) / (2.0 * h))
    return np.stack(cols, axis=-1)
