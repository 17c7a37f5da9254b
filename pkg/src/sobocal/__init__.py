"""Sobolev calibration of imperfect computer models."""

__version__ = "0.1.0"

from .calibration import (
    CalibrationProblem,
    CalibrationResult,
    OptimizerConfig,
    SobolevCalibrator,
    build_norm_space,
    calibrate,
    objective,
    true_parameter,
)
from .kernels import KernelMatrix, KernelSpec, kernel_matrix, matern_eval, power_kernel_eval
from .norms import NormSpace, norm_sq
from .regression import Dataset, GaussianProcessRegressor, KernelRidgeGCV, SurfaceModel, fit_krr, gp_posterior
from .spectral import EigenBasis, eigen_truncation_error, nystrom_decompose
from .uq import UQReport, compute_V, compute_W, confidence_bands, interval_score, theta_confidence_interval

__all__ = [
    "CalibrationProblem",
    "CalibrationResult",
    "Dataset",
    "EigenBasis",
    "GaussianProcessRegressor",
    "KernelMatrix",
    "KernelRidgeGCV",
    "KernelSpec",
    "NormSpace",
    "OptimizerConfig",
    "SobolevCalibrator",
    "SurfaceModel",
    "UQReport",
    "build_norm_space",
    "calibrate",
    "compute_V",
    "compute_W",
    "confidence_bands",
    "eigen_truncation_error",
    "fit_krr",
    "gp_posterior",
    "interval_score",
    "kernel_matrix",
    "matern_eval",
    "norm_sq",
    "nystrom_decompose",
    "objective",
    "power_kernel_eval",
    "theta_confidence_interval",
    "true_parameter",
]
