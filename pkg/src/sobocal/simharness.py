"""Seeded Monte Carlo studies of calibration estimators.

Each trial draws its own random stream from ``SeedSequence([seed, trial])`` so
that a single trial can be re-run in isolation and trials can execute in any
order or concurrently without changing the outputs.  Within a trial the design
points and standardized noise are shared by every noise level and every mode.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .calibration import (
    CalibrationProblem,
    OptimizerConfig,
    build_norm_space,
    calibrate,
    fit_physical,
    mode_label,
    parse_mode,
    true_parameter,
)
from .exceptions import SobocalError, StudyFailed
from .kernels import KernelSpec
from .models import ExperimentModel, get_model
from .norms import sobolev_integer_norm_sq
from .regression import DEFAULT_MU_GRID, Dataset, select_mu_validation
from .uq import confidence_bands, default_basis, compute_V, compute_W, interval_score, theta_confidence_interval

MAX_FAILURE_FRACTION = 0.10
PILOT_SIZE = 300
PILOT_STREAM = 2**31 - 1

TRIAL_COLUMNS = [
    "trial",
    "sigma2",
    "mode",
    "coord",
    "theta_hat",
    "theta_star",
    "theta_star_s",
    "objective",
    "converged",
    "ci_lower",
    "ci_upper",
    "covered",
    "ci_score",
    "fs_band_coverage",
    "fp_band_coverage",
    "fs_band_score",
    "fp_band_score",
    "error",
]

SUMMARY_COLUMNS = [
    "mode",
    "sigma2",
    "coord",
    "n_trials",
    "n_failed",
    "theta_star",
    "mean",
    "sd",
    "mse",
    "mse_s",
    "coverage",
    "mean_length",
    "mean_score",
    "fs_band_coverage",
    "fp_band_coverage",
    "fs_band_score",
    "fp_band_score",
    "flag",
]


def thread_count(requested: Optional[int] = None) -> int:
    """Worker threads: ``requested``, capped by ``SOBOCAL_THREADS`` when set."""
    cap = os.environ.get("SOBOCAL_THREADS")
    n = requested if requested is not None else 1
    if cap:
        n = min(n, int(cap)) if requested is not None else int(cap)
    return max(1, n)


@dataclass
class StudyConfig:
    """Description of a simulation study.

    Parameters
    ----------
    experiment : str
        Built-in model name or ``module:function``.
    modes : list of str
        Calibration modes, e.g. ``["sobolev:1", "l2", "ko"]``.
    n : int
        Physical observations per trial.
    noise_variances : list of float
    trials : int
    seed : int
        Master seed.
    design_size, design_seed : int
        Size and seed of the frozen norm design.
    eigen_terms : int, optional
        Truncation of the W sum; the standard default per order when omitted.
    bounds : list of (float, float), optional
        Parameter box; the model default when omitted.
    length_scale : float
        Length scale of the norm kernel.
    physical_length_scale : float
        Length scale of the physical-process kernel.
    route : {"matern", "power"}
    physical : {"krr", "gp"}, optional
        Defaults to GP for stochastic truths and KRR otherwise.
    uq : bool
        Compute sandwich intervals.
    bands : bool
        Compute point-wise bands (implies ``uq``).
    levels : list of float
        Confidence levels; the first drives bands.
    band_draws, band_grid : int
    threads : int, optional
    model_options : dict
    output_dir : str, optional
    """

    experiment: str = "example_c3"
    modes: list = field(default_factory=lambda: ["sobolev:1", "l2", "ko"])
    n: int = 200
    noise_variances: list = field(default_factory=lambda: [0.05])
    trials: int = 100
    seed: int = 0
    design_size: int = 300
    design_seed: int = 0
    eigen_terms: Optional[int] = None
    bounds: Optional[list] = None
    length_scale: float = 1.0
    physical_length_scale: float = 1.0
    route: str = "matern"
    physical: Optional[str] = None
    uq: bool = False
    bands: bool = False
    levels: list = field(default_factory=lambda: [0.95])
    band_draws: int = 100
    band_grid: int = 100
    threads: Optional[int] = None
    model_options: dict = field(default_factory=dict)
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trial count must be at least 1")
        if self.n < 2:
            raise ValueError("each trial needs at least 2 observations")
        self.modes = [mode_label(*parse_mode(m)) for m in self.modes]
        self.noise_variances = [float(s) for s in self.noise_variances]
        self.levels = [float(a) for a in self.levels]
        if self.bands:
            self.uq = True
        get_model(self.experiment, **self.model_options)

    def model(self) -> ExperimentModel:
        return get_model(self.experiment, **self.model_options)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StudySummary:
    """Aggregated rows plus the raw per-trial records they were computed from."""

    rows: list
    records: list
    failures: int
    config: StudyConfig
    bands: dict = field(default_factory=dict)
    experiment: object = field(default=None, repr=False, compare=False)

    def coverage_at(self, level, mode, sigma2=None, coord=0) -> float:
        """Empirical parameter coverage at any of the configured levels."""
        mode = mode_label(*parse_mode(mode))
        key = "covered" if float(level) == self.config.levels[0] else f"covered_{float(level)}"
        hits = [
            r[key]
            for r in self.records
            if not r.get("error") and r["mode"] == mode and r["coord"] == coord and (sigma2 is None or r["sigma2"] == float(sigma2))
        ]
        return float(np.mean(hits))

    def cell(self, mode, sigma2=None, coord=0) -> dict:
        mode = mode_label(*parse_mode(mode))
        for r in self.rows:
            if r["mode"] == mode and r["coord"] == coord and (sigma2 is None or r["sigma2"] == float(sigma2)):
                return r
        raise KeyError(f"no summary row for mode={mode}, sigma2={sigma2}")

    def summary_csv(self) -> str:
        return _csv_text(self.rows, SUMMARY_COLUMNS)

    def trials_csv(self) -> str:
        return _csv_text(self.records, TRIAL_COLUMNS)

    def write(self, directory=None) -> list:
        directory = directory or self.config.output_dir
        if directory is None:
            raise ValueError("no output directory given")
        os.makedirs(directory, exist_ok=True)
        paths = []
        for name, text in (("summary.csv", self.summary_csv()), ("trials.csv", self.trials_csv())):
            path = os.path.join(directory, name)
            with open(path, "w", newline="", encoding="utf-8") as fh:
                fh.write(text)
            paths.append(path)
        for target, rows in self.bands.items():
            path = os.path.join(directory, f"bands_{target}.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                fh.write(_csv_text(rows, ["mode", "sigma2", "x", "lower", "upper", "truth"]))
            paths.append(path)
        return paths


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def _csv_text(rows, columns) -> str:
    buf = io.StringIO()
    buf.write(f"# sobocal {__version__}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def read_csv_rows(path) -> list:
    """Rows of a study CSV as dicts of strings, skipping ``#`` header lines."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def trial_seed(master: int, trial: int) -> np.random.SeedSequence:
    """Per-trial seed, ``SeedSequence([master, trial])``."""
    return np.random.SeedSequence([int(master), int(trial)])


def _mean_or_nan(values):
    vals = [v for v in values if v is not None and np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def summarize(records: Sequence[dict], config: StudyConfig) -> list:
    """Summary rows from per-trial records; depends on nothing else."""
    rows = []
    ok = [r for r in records if not r.get("error")]
    keys = sorted({(r["mode"], r["sigma2"], r["coord"]) for r in records}, key=lambda k: (config.modes.index(k[0]), k[1], k[2]))
    for mode, s2, coord in keys:
        cell = sorted((r for r in ok if (r["mode"], r["sigma2"], r["coord"]) == (mode, s2, coord)), key=lambda r: r["trial"])
        failed = sum(1 for r in records if (r["mode"], r["sigma2"], r["coord"]) == (mode, s2, coord) and r.get("error"))
        th = np.array([r["theta_hat"] for r in cell], dtype=float)
        star = np.array([r["theta_star"] for r in cell], dtype=float)
        star_s = np.array([r["theta_star_s"] for r in cell], dtype=float)
        k = len(th)
        row = {"mode": mode, "sigma2": s2, "coord": coord, "n_trials": k, "n_failed": failed}
        if k:
            row["theta_star"] = float(np.mean(star))
            row["mean"] = float(np.mean(th))
            row["sd"] = float(np.std(th, ddof=1)) if k > 1 else 0.0
            row["mse"] = float(np.mean((th - star) ** 2))
            row["mse_s"] = float(np.mean((th - star_s) ** 2))
        row["flag"] = "single_trial" if k == 1 else ""
        if config.uq:
            covered = [r["covered"] for r in cell if r.get("covered") is not None]
            row["coverage"] = float(np.mean(covered)) if covered else float("nan")
            row["mean_length"] = _mean_or_nan([r["ci_upper"] - r["ci_lower"] for r in cell if r.get("ci_upper") is not None])
            row["mean_score"] = _mean_or_nan([r.get("ci_score") for r in cell])
        if config.bands:
            for c in ("fs_band_coverage", "fp_band_coverage", "fs_band_score", "fp_band_score"):
                row[c] = _mean_or_nan([r.get(c) for r in cell])
        rows.append(row)
    return rows


class _Experiment:
    """Per-study state shared by all trials: model, norm spaces, true parameters."""

    def __init__(self, config: StudyConfig):
        self.config = config
        self.model = config.model()
        self.bounds = np.asarray(config.bounds if config.bounds is not None else self.model.bounds, dtype=float)
        self.lo, self.hi = self.model.domain
        self.spaces = {
            m: build_norm_space(m, None, 1, config.design_size, config.design_seed, config.length_scale, config.route)
            for m in config.modes
        }
        self.sobolev_label = next((m for m in config.modes if m.startswith("sobolev")), "sobolev:1")
        if self.sobolev_label not in self.spaces:
            self.spaces[self.sobolev_label] = build_norm_space(
                self.sobolev_label, None, 1, config.design_size, config.design_seed, config.length_scale, config.route
            )
        self.physical = config.physical or ("gp" if self.model.stochastic else "krr")
        self.bases = {}
        self.theta_star = {}
        if not self.model.stochastic:
            truth = self._unit(self.model.physical_truth)
            for m, space in self.spaces.items():
                self.theta_star[m] = true_parameter(self._problem(truth, space, m))
        self.mu = self._pilot_mu() if self.physical == "gp" else None

    def _unit(self, f):
        # models on [lo, hi] seen through inputs on [0, 1]
        if (self.lo, self.hi) == (0.0, 1.0):
            return f
        return lambda u: f(self.lo + (self.hi - self.lo) * np.asarray(u))

    def computer(self):
        return self._unit_fs(self.model.computer_model)

    def _unit_fs(self, fs):
        if (self.lo, self.hi) == (0.0, 1.0):
            return fs
        return lambda u, t: fs(self.lo + (self.hi - self.lo) * np.asarray(u), t)

    def gradient(self):
        g = self.model.gradient
        if g is None or (self.lo, self.hi) == (0.0, 1.0):
            return g
        return lambda u, t: g(self.lo + (self.hi - self.lo) * np.asarray(u), t)

    def _problem(self, physical, space, mode):
        return CalibrationProblem(physical, self.computer(), self.bounds, space, mode, self.gradient())

    def _pilot_mu(self):
        stream = np.random.default_rng(trial_seed(self.config.seed, PILOT_STREAM))
        truth = self._unit(self.model.sample_truth(stream))
        x = stream.uniform(0.0, 1.0, PILOT_SIZE)
        s2 = self.config.noise_variances[0]
        y = truth(x) + np.sqrt(s2) * stream.standard_normal(PILOT_SIZE)
        data = Dataset(x, y, s2)
        kernel = KernelSpec.matern(2, 1, self.config.physical_length_scale)
        return select_mu_validation(data, kernel, DEFAULT_MU_GRID, 0.3, stream)

    def basis(self, mode):
        if mode not in self.bases:
            problem = self._problem(lambda x: np.zeros(np.shape(x)[0]), self.spaces[mode], mode)
            self.bases[mode] = default_basis(problem, N=self.config.eigen_terms)
        return self.bases[mode]

    def run_trial(self, trial: int) -> tuple:
        cfg = self.config
        rng = np.random.default_rng(trial_seed(cfg.seed, trial))
        truth = self._unit(self.model.sample_truth(rng))
        x = rng.uniform(0.0, 1.0, cfg.n)
        eps = rng.standard_normal(cfg.n)
        fx = np.asarray(truth(x), dtype=float)
        band_seed = rng.integers(2**32)
        if self.model.stochastic:
            stars = {m: true_parameter(self._problem(truth, space, m)) for m, space in self.spaces.items()}
        else:
            stars = self.theta_star
        star_s = stars[self.sobolev_label]
        q = len(self.bounds)
        records, bands = [], {}
        for s2 in cfg.noise_variances:
            try:
                data = Dataset(x, fx + np.sqrt(s2) * eps, s2)
                physical = fit_physical(data, self.physical, 2, cfg.physical_length_scale, mu=self.mu)
            except (SobocalError, ValueError, np.linalg.LinAlgError) as exc:
                for m in cfg.modes:
                    records += [self._failed(trial, s2, m, k, exc) for k in range(q)]
                continue
            for m in cfg.modes:
                try:
                    recs, bd = self._calibrate_mode(trial, s2, m, physical, data, truth, stars[m], star_s, band_seed)
                    records += recs
                    if bd:
                        bands[(m, s2)] = bd
                except (SobocalError, ValueError, np.linalg.LinAlgError, ArithmeticError) as exc:
                    records += [self._failed(trial, s2, m, k, exc) for k in range(q)]
        return records, bands

    def _failed(self, trial, s2, mode, coord, exc):
        return {"trial": trial, "sigma2": s2, "mode": mode, "coord": coord, "error": f"{type(exc).__name__}: {exc}"}

    def _calibrate_mode(self, trial, s2, mode, physical, data, truth, star, star_s, band_seed):
        cfg = self.config
        problem = self._problem(physical, self.spaces[mode], mode)
        result = calibrate(problem, OptimizerConfig(seed=cfg.seed))
        theta = result.theta
        out = []
        for k in range(len(theta)):
            out.append(
                {
                    "trial": trial,
                    "sigma2": s2,
                    "mode": mode,
                    "coord": k,
                    "theta_hat": float(theta[k]),
                    "theta_star": float(star[k]),
                    "theta_star_s": float(star_s[k]),
                    "objective": result.objective,
                    "converged": bool(result.trace["converged"]),
                }
            )
        bands = None
        if cfg.uq:
            basis, beta = self.basis(mode)
            V = compute_V(problem, theta)
            W = compute_W(problem, theta, basis, beta)
            level = cfg.levels[0]
            intervals, cov = theta_confidence_interval(theta, V, W, s2, data.n, level)
            for k, rec in enumerate(out):
                lo, hi = intervals[k]
                rec.update(ci_lower=float(lo), ci_upper=float(hi), covered=bool(lo <= star[k] <= hi))
                rec["ci_score"] = interval_score(lo, hi, star[k], level)
                for extra in cfg.levels[1:]:
                    iv, _ = theta_confidence_interval(theta, V, W, s2, data.n, extra)
                    rec[f"covered_{extra}"] = bool(iv[k, 0] <= star[k] <= iv[k, 1])
            if cfg.bands:
                grid = np.linspace(0.0, 1.0, cfg.band_grid)
                bd = confidence_bands(problem, theta, cov, data, cfg.band_draws, grid, level, band_seed)
                fs_truth = problem.computer_model(grid, star)
                fp_truth = np.asarray(truth(grid), dtype=float)
                for rec in out:
                    rec.update(
                        fs_band_coverage=bd["fs"].coverage(fs_truth),
                        fp_band_coverage=bd["fp"].coverage(fp_truth),
                        fs_band_score=bd["fs"].score(fs_truth),
                        fp_band_score=bd["fp"].score(fp_truth),
                    )
                bands = {"fs": (bd["fs"], fs_truth), "fp": (bd["fp"], fp_truth)}
        return out, bands


def run_study(config: StudyConfig) -> StudySummary:
    """Run every trial, aggregate, and write outputs when ``output_dir`` is set.

    Raises
    ------
    StudyFailed
        If more than 10% of trials fail.
    """
    exp = _Experiment(config)
    workers = thread_count(config.threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(exp.run_trial, range(config.trials)))
    else:
        results = [exp.run_trial(t) for t in range(config.trials)]
    records = sorted((r for recs, _ in results for r in recs), key=lambda r: (r["trial"], config.modes.index(r["mode"]), r["sigma2"], r["coord"]))
    failed_trials = {r["trial"] for r in records if r.get("error")}
    if len(failed_trials) > MAX_FAILURE_FRACTION * config.trials:
        raise StudyFailed(f"{len(failed_trials)} of {config.trials} trials failed; first error: "
                          f"{next(r['error'] for r in records if r.get('error'))}")
    bands = {}
    for recs, bd in results:
        for (mode, s2), pair in bd.items():
            for target, (band, truth) in pair.items():
                rows = bands.setdefault(target, [])
                if any(r["mode"] == mode and r["sigma2"] == s2 for r in rows):
                    continue
                rows += [
                    {"mode": mode, "sigma2": s2, "x": float(x), "lower": float(a), "upper": float(b), "truth": float(t)}
                    for x, a, b, t in zip(band.grid, band.lower, band.upper, truth)
                ]
    summary = StudySummary(summarize(records, config), records, len(failed_trials), config, bands, exp)
    if config.output_dir:
        summary.write()
    return summary


DEFAULT_GAMMAS = (0.01, 0.1, 1.0, 10.0)


def scale_study(config: StudyConfig, gammas: Sequence[float] = DEFAULT_GAMMAS) -> list:
    """Length-scale study of Sobolev order-1 calibration.

    For each ``gamma`` the norm kernel is ``exp(-gamma |x - x'|)``.  Rows hold
    ``theta_star``, mean and SD of the estimates, and the unsquared RKHS and
    ``W^1`` norms of ``f_p - f_s(., mean estimate)`` with the exact ``f_p``.
    Trial datasets do not depend on ``gamma``.
    """
    rows = []
    for gamma in gammas:
        cfg = StudyConfig(**{**config.to_dict(), "modes": ["sobolev:1"], "length_scale": float(gamma), "uq": False, "bands": False, "output_dir": None})
        summary = run_study(cfg)
        cell = summary.cell("sobolev:1", cfg.noise_variances[0])
        exp = summary.experiment
        if exp.model.stochastic:
            raise ValueError("scale_study needs a deterministic physical truth")
        mean_theta = np.array([cell["mean"]])
        fs = exp.computer()
        truth = exp._unit(exp.model.physical_truth)

        def delta(u, t=mean_theta):
            return np.asarray(truth(u)) - np.asarray(fs(u, t))

        space = exp.spaces["sobolev:1"]
        rows.append(
            {
                "gamma": float(gamma),
                "theta_star": float(exp.theta_star["sobolev:1"][0]),
                "mean": cell["mean"],
                "sd": cell["sd"],
                "rkhs_norm": float(np.sqrt(space.evaluate(delta))),
                "sobolev_norm": float(np.sqrt(sobolev_integer_norm_sq(delta, 1))),
                "n_trials": cell["n_trials"],
            }
        )
    return rows


SCALE_COLUMNS = ["gamma", "theta_star", "mean", "sd", "rkhs_norm", "sobolev_norm", "n_trials"]


def scale_csv(rows) -> str:
    return _csv_text(rows, SCALE_COLUMNS)
