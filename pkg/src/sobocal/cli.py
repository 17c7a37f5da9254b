"""Command-line interface.

Every subcommand resolves its configuration from built-in defaults, an
optional JSON file (``--config``) and command-line flags, in increasing order
of precedence.  The resolved snapshot is written to ``manifest.json`` in the
output directory before any computation starts.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields
from fractions import Fraction

import numpy as np

from . import __version__
from .calibration import (
    CalibrationProblem,
    OptimizerConfig,
    build_norm_space,
    calibrate,
    fit_physical,
    mode_label,
    objective,
    parse_mode,
)
from .exceptions import DatasetError, OptimizationFailed, SobocalError
from .kernels import KernelSpec
from .models import get_model
from .regression import Dataset, estimate_noise_variance, gcv_select_lambda
from .simharness import StudyConfig, run_study, scale_csv, scale_study
from .spectral import DEFAULT_TRUNCATION, eigen_truncation_error, nystrom_decompose, nystrom_decompose_all, power_decomposition
from .uq import default_basis, run_uq, write_band_csv

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_OPTIMIZATION = 2

HEADER = f"sobocal {__version__}"

CALIBRATE_DEFAULTS = {
    "data": None,
    "model": "example_c3",
    "mode": "sobolev",
    "m": 1.0,
    "route": "matern",
    "physical": "krr",
    "physical_m": 2.0,
    "length_scale": 1.0,
    "bounds": None,
    "design_size": 300,
    "design_seed": 0,
    "seed": 0,
    "noise_variance": None,
    "x_columns": None,
    "y_column": None,
    "profile_points": 201,
}

UQ_DEFAULTS = {
    "run": None,
    "level": 0.95,
    "draws": 100,
    "grid_size": 100,
    "eigen_terms": None,
    "noise_variance": None,
    "seed": 0,
}

EIGEN_DEFAULTS = {
    "orders": ["1", "2"],
    "terms": None,
    "grid_size": 1000,
    "test_points": 1000,
    "length_scale": 1.0,
    "n_eigenvalues": 20,
}

STUDY_DEFAULTS = {f.name: (f.default_factory() if callable(f.default_factory) else f.default) for f in fields(StudyConfig)}
SCALE_DEFAULTS = {
    **STUDY_DEFAULTS,
    "experiment": "example1",
    "noise_variances": [0.1],
    "gammas": [0.01, 0.1, 1.0, 10.0],
}

LIST_KEYS = {"modes", "noise_variances", "levels", "orders", "gammas"}


def _parse_value(key, text, defaults):
    if key in LIST_KEYS:
        items = [t for t in str(text).split(",") if t]
        if key in ("modes", "orders"):
            return items
        return [float(t) for t in items]
    if key == "bounds":
        return [[float(v) for v in pair.split(",")] for pair in str(text).split(";")]
    if key == "x_columns":
        return [t for t in str(text).split(",") if t]
    if key == "model_options":
        return json.loads(text)
    default = defaults.get(key)
    if isinstance(default, bool):
        return str(text).lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if key in ("noise_variance", "physical_length_scale"):
        return float(text)
    if key in ("eigen_terms", "threads", "terms"):
        return int(text)
    return text


def _add_keys(parser, defaults, skip=()):
    for key, default in defaults.items():
        if key in skip:
            continue
        shown = json.dumps(default)
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="VALUE", help=f"(default: {shown})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sobocal", description="Sobolev calibration of imperfect computer models.")
    parser.add_argument("--version", action="version", version=HEADER)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON file of configuration keys (default: none)")
        p.add_argument("--out", default=None, help="output directory (default: ./sobocal-<command>)")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("calibrate", help="calibrate a computer model against a CSV dataset")
    common(p)
    _add_keys(p, CALIBRATE_DEFAULTS)

    p = sub.add_parser("uq", help="intervals and bands for a completed calibration")
    common(p)
    _add_keys(p, UQ_DEFAULTS)

    p = sub.add_parser("eigen", help="Nyström eigenvalues and truncation errors")
    common(p)
    _add_keys(p, EIGEN_DEFAULTS)

    p = sub.add_parser("study", help="seeded Monte Carlo simulation study")
    common(p)
    _add_keys(p, STUDY_DEFAULTS, skip=("output_dir",))

    p = sub.add_parser("scale-study", help="length-scale study of Sobolev calibration")
    common(p)
    _add_keys(p, SCALE_DEFAULTS, skip=("output_dir", "modes", "length_scale", "uq", "bands", "levels"))
    return parser


def resolve_config(args, defaults) -> dict:
    config = {k: (list(v) if isinstance(v, list) else v) for k, v in defaults.items()}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        config.update(loaded)
    for key in defaults:
        raw = getattr(args, key, None)
        if raw is not None:
            config[key] = _parse_value(key, raw, defaults)
    return config


def prepare_output(args, command, config) -> str:
    out = args.out or f"sobocal-{command}"
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise FileExistsError(f"output directory {out} is not empty; pass --force to overwrite")
    os.makedirs(out, exist_ok=True)
    manifest = {
        "subcommand": command,
        "config_path": args.config,
        "config": config,
        "version": __version__,
        "seed": config.get("seed"),
        "output_dir": os.path.abspath(out),
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return out


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"version": __version__, **payload}, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


def _write_rows(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {HEADER}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)


def _load_dataset(config, model):
    if not config["data"]:
        raise ValueError("calibrate needs --data")
    columns = None
    if config["x_columns"] or config["y_column"]:
        columns = (config["x_columns"] or ["x1"], config["y_column"] or "y")
    elif model.name == "ion_channel":
        columns = (["log_time"], "normalized_current")
    domain = None if model.domain == (0.0, 1.0) else model.domain
    data = Dataset.from_csv(config["data"], config["noise_variance"], domain, columns)
    if domain is not None:
        lo, hi = domain
        data = Dataset((data.inputs - lo) / (hi - lo), data.responses, data.noise_variance)
    return data


def _unit_model(model):
    lo, hi = model.domain
    fs, grad = model.computer_model, model.gradient
    if (lo, hi) == (0.0, 1.0):
        return fs, grad
    wrap = lambda u: lo + (hi - lo) * np.asarray(u)  # noqa: E731
    return (lambda u, t: fs(wrap(u), t)), (None if grad is None else (lambda u, t: grad(wrap(u), t)))


def _calibration_problem(config):
    model = get_model(config["model"])
    data = _load_dataset(config, model)
    fs, grad = _unit_model(model)
    physical = fit_physical(data, config["physical"], config["physical_m"], config["length_scale"], seed=config["seed"])
    kind, order = parse_mode(config["mode"], config["m"], config["physical_m"])
    space = build_norm_space(
        config["mode"],
        config["m"],
        data.d,
        config["design_size"],
        config["design_seed"],
        config["length_scale"],
        config["route"],
        config["physical_m"],
    )
    bounds = config["bounds"] if config["bounds"] is not None else model.bounds
    return CalibrationProblem(physical, fs, bounds, space, mode_label(kind, order), grad), data


def cmd_calibrate(args) -> int:
    config = resolve_config(args, CALIBRATE_DEFAULTS)
    out = prepare_output(args, "calibrate", config)
    problem, data = _calibration_problem(config)
    try:
        result = calibrate(problem, OptimizerConfig(seed=config["seed"]))
    except OptimizationFailed as exc:
        _write_json(os.path.join(out, "trace.json"), {"error": str(exc), "trace": exc.trace})
        raise
    payload = result.to_dict()
    payload["n"] = data.n
    payload["physical_regularizer"] = problem.physical_model.regularizer
    _write_json(os.path.join(out, "result.json"), payload)
    rows = []
    for k in range(problem.q):
        lo, hi = problem.bounds[k]
        for t in np.linspace(lo, hi, config["profile_points"]):
            theta = result.theta.copy()
            theta[k] = t
            rows.append([k, repr(float(t)), repr(objective(theta, problem))])
    _write_rows(os.path.join(out, "objective_profile.csv"), ["coord", "theta", "objective"], rows)
    print(json.dumps(payload))
    return EXIT_OK


def cmd_uq(args) -> int:
    config = resolve_config(args, UQ_DEFAULTS)
    if not config["run"]:
        raise ValueError("uq needs --run pointing at a calibrate output directory")
    with open(os.path.join(config["run"], "manifest.json"), encoding="utf-8") as fh:
        cal_config = json.load(fh)["config"]
    with open(os.path.join(config["run"], "result.json"), encoding="utf-8") as fh:
        result = json.load(fh)
    out = prepare_output(args, "uq", config)
    problem, data = _calibration_problem(cal_config)
    theta = np.asarray(result["theta"], dtype=float)
    sigma2 = config["noise_variance"] or cal_config.get("noise_variance")
    if sigma2 is None:
        kernel = KernelSpec.matern(cal_config["physical_m"], data.d, cal_config["length_scale"])
        sigma2 = estimate_noise_variance(data, kernel, gcv_select_lambda(data, kernel))
    basis = None
    beta = None
    if config["eigen_terms"]:
        basis, beta = default_basis(problem, N=config["eigen_terms"])
    grid = np.linspace(0.0, 1.0, config["grid_size"])
    report = run_uq(problem, theta, data, sigma2, config["level"], basis, beta, True, config["draws"], grid, config["seed"])
    for name, band in report.bands.items():
        write_band_csv(os.path.join(out, f"bands_{name}.csv"), band, HEADER)
    with open(os.path.join(out, "uq_summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# {HEADER}\n{report.summary()}\n")
    payload = {
        "theta": theta,
        "noise_variance": sigma2,
        "level": config["level"],
        "V": report.V,
        "W": report.W,
        "covariance": report.covariance,
        "intervals": report.intervals,
    }
    _write_json(os.path.join(out, "uq.json"), payload)
    print(json.dumps(payload, default=_json_default))
    return EXIT_OK


def eigen_table(orders, terms=None, M=1000, test_points=1000, length_scale=1.0):
    """Rows ``(m, base_m, beta, N, M, error)`` of truncation errors."""
    tests = np.linspace(0.0, 1.0, test_points)
    rows = []
    for label in orders:
        m = Fraction(label).limit_denominator(1000)
        N = int(terms) if terms else DEFAULT_TRUNCATION.get(m, 12)
        if m in (Fraction(1), Fraction(2), Fraction(3)):
            base, beta = KernelSpec.matern(m, 1, length_scale), 1.0
            basis = nystrom_decompose(base, M, N)
            err = eigen_truncation_error(basis, tests)
        else:
            base, beta = power_decomposition(m, length_scale)
            full = nystrom_decompose_all(base, M)
            err = eigen_truncation_error(full.truncate(N), tests, beta, full)
            basis = full.truncate(N)
        rows.append((str(m), str(base.m), beta, N, M, err, basis))
    return rows


def cmd_eigen(args) -> int:
    config = resolve_config(args, EIGEN_DEFAULTS)
    out = prepare_output(args, "eigen", config)
    table = eigen_table(config["orders"], config["terms"], config["grid_size"], config["test_points"], config["length_scale"])
    _write_rows(
        os.path.join(out, "eigen_errors.csv"),
        ["m", "base_m", "beta", "N", "M", "error"],
        [[m, bm, repr(b), N, M, repr(e)] for m, bm, b, N, M, e, _ in table],
    )
    rows = []
    for m, _, _, _, _, _, basis in table:
        k = min(config["n_eigenvalues"], basis.n_terms)
        rows += [[m, j + 1, repr(float(v))] for j, v in enumerate(basis.eigenvalues[:k])]
    _write_rows(os.path.join(out, "eigenvalues.csv"), ["m", "index", "eigenvalue"], rows)
    for m, _, _, N, _, e, _ in table:
        print(f"m={m} N={N} error={e:.6g}")
    return EXIT_OK


def _study_config(config, out):
    return StudyConfig(**{k: v for k, v in config.items() if k in STUDY_DEFAULTS and k != "output_dir"}, output_dir=out)


def cmd_study(args) -> int:
    config = resolve_config(args, {k: v for k, v in STUDY_DEFAULTS.items() if k != "output_dir"})
    out = prepare_output(args, "study", config)
    summary = run_study(_study_config(config, out))
    sys.stdout.write(summary.summary_csv())
    return EXIT_OK


def cmd_scale_study(args) -> int:
    defaults = {k: v for k, v in SCALE_DEFAULTS.items() if k not in ("output_dir", "modes", "length_scale", "uq", "bands", "levels")}
    config = resolve_config(args, defaults)
    out = prepare_output(args, "scale-study", config)
    cfg = _study_config({k: v for k, v in config.items() if k != "gammas"}, None)
    rows = scale_study(cfg, config["gammas"])
    text = scale_csv(rows)
    with open(os.path.join(out, "scale.csv"), "w", newline="", encoding="utf-8") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "uq": cmd_uq,
    "eigen": cmd_eigen,
    "study": cmd_study,
    "scale-study": cmd_scale_study,
}


def _report(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, DatasetError) and exc.line is not None:
        payload["line"] = exc.line
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except OptimizationFailed as exc:
        return _report(exc, EXIT_OPTIMIZATION)
    except (SobocalError, ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as exc:
        return _report(exc, EXIT_ERROR)


if __name__ == "__main__":
    sys.exit(main())
