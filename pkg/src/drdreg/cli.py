"""Command-line surface: synthetic data generation, fitting, the phase grid,
and the runtime bench.

Every command resolves its configuration (defaults, then config file, then
explicit flags), validates it fully before any side effect, and derives all
randomness from the single seed through documented SeedSequence spawn keys.

Exit codes: 0 success (including flagged non-convergence), 2 invalid
configuration, 3 I/O failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import io as dio
from .baselines import ard_fit, asd_fit, lasso_fit
from .bench import (
    PhaseConfig,
    RuntimeConfig,
    make_estimators,
    run_phase_grid,
    run_runtime_bench,
)
from .convex import fit_convex
from .kernels import GpHypers, LocationGrid
from .laplace import conditional_posterior, fit_empirical_bayes
from .bench import default_eb_configs
from .linalg import PSDError
from .mcmc import ChainConfig, HyperPriors, posterior_mean_weights, run_gibbs
from .prior import Dataset, ModelHypers, build_covariance, sample_dataset, sample_prior

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

ESTIMATORS = (
    "drd-laplace",
    "drd-convex",
    "drd-mcmc",
    "sdrd-laplace",
    "sdrd-mcmc",
    "ard",
    "asd",
    "lasso",
)


def _parse_float_list(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


SYNTH_DEFAULTS = {
    "p": 4000,
    "n": 500,
    "sigma2": 5.0,
    "b": -8.0,
    "rho": 36.0,
    "l": "auto",
    "delta": "50",
    "link": "exp",
    "seed": 0,
    "tol_fourier": 1e-7,
}

FIT_DEFAULTS = {
    "estimator": "sdrd-laplace",
    "seed": 0,
    "folds": 5,
    "link": "exp",
    "tol_fourier": 1e-7,
    "restarts": 1,
    "mcmc_samples": 100,
    "burn_in_max": 500,
}

PHASE_DEFAULTS = {
    "p": 128,
    "alphas": "0.1,0.15,0.2",
    "gammas": "",
    "g": 1,
    "smooth_len": 0.0,
    "trials": 10,
    "threshold": 0.95,
    "solvers": "lasso,drd-laplace",
    "seed": 0,
}

BENCH_DEFAULTS = {
    "p_values": "64,128,256",
    "n_values": "100",
    "reps": 5,
    "estimators": "drd-laplace,sdrd-laplace",
    "seed": 0,
    "sigma2": 5.0,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drdreg",
        description="Structured-sparse Bayesian regression toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--out", help="output path", default=None)
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("synth", help="sample a synthetic dataset with ground truth")
    add_common(sp)
    sp.add_argument("--p", type=int, default=None)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--sigma2", type=float, default=None)
    sp.add_argument("--b", type=float, default=None)
    sp.add_argument("--rho", type=float, default=None)
    sp.add_argument("--l", default=None, help="length scale or 'auto' (= p/40)")
    sp.add_argument(
        "--delta", default=None, help="smoothing scale, 'auto' (= p/20), or 'none'"
    )
    sp.add_argument("--link", choices=("exp", "softplus"), default=None)
    sp.add_argument("--tol-fourier", dest="tol_fourier", type=float, default=None)

    sp = sub.add_parser("fit", help="fit an estimator to a dataset file")
    add_common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--estimator", choices=ESTIMATORS, default=None)
    sp.add_argument("--folds", type=int, default=None)
    sp.add_argument("--link", choices=("exp", "softplus"), default=None)
    sp.add_argument("--tol-fourier", dest="tol_fourier", type=float, default=None)
    sp.add_argument("--restarts", type=int, default=None)
    sp.add_argument("--mcmc-samples", dest="mcmc_samples", type=int, default=None)
    sp.add_argument("--burn-in-max", dest="burn_in_max", type=int, default=None)
    sp.add_argument(
        "--import-weights",
        action="append",
        default=None,
        metavar="METHOD=CSV",
        help="evaluate externally computed weights instead of fitting",
    )

    sp = sub.add_parser("phase", help="noiseless phase-transition grid")
    add_common(sp)
    sp.add_argument("--p", type=int, default=None)
    sp.add_argument("--alphas", default=None)
    sp.add_argument("--gammas", default=None)
    sp.add_argument("--g", type=int, default=None)
    sp.add_argument("--smooth-len", dest="smooth_len", type=float, default=None)
    sp.add_argument("--trials", type=int, default=None)
    sp.add_argument("--threshold", type=float, default=None)
    sp.add_argument("--solvers", default=None)

    sp = sub.add_parser("bench", help="runtime measurements across sizes")
    add_common(sp)
    sp.add_argument("--p-values", dest="p_values", default=None)
    sp.add_argument("--n-values", dest="n_values", default=None)
    sp.add_argument("--reps", type=int, default=None)
    sp.add_argument("--estimators", default=None)
    sp.add_argument("--sigma2", type=float, default=None)
    return parser


def _resolve(args, defaults: dict) -> dict:
    """Defaults, then config file, then explicit flags."""
    resolved = dict(defaults)
    resolved["seed"] = 0
    resolved["out"] = None
    if args.config:
        file_conf = dio.parse_config_file(args.config)
        for key, value in file_conf.items():
            key = key.replace("-", "_")
            if key not in resolved:
                raise ValueError(f"unknown config key {key!r}")
            resolved[key] = value
    for key in resolved:
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            resolved[key] = cli_val
    # normalize types that may have come in as strings from the file
    for key, ref in defaults.items():
        if isinstance(ref, bool):
            resolved[key] = str(resolved[key]) in ("1", "true", "True")
        elif isinstance(ref, int):
            resolved[key] = int(resolved[key])
        elif isinstance(ref, float):
            resolved[key] = float(resolved[key])
    resolved["seed"] = int(resolved["seed"])
    return resolved


def _auto_scale(value, p: int, divisor: float, allow_none=False):
    if isinstance(value, str):
        if value == "auto":
            return p / divisor
        if allow_none and value in ("none", ""):
            return None
        return float(value)
    return float(value)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(conf: dict) -> int:
    if conf["out"] is None:
        raise ValueError("--out is required")
    p, n = conf["p"], conf["n"]
    length = _auto_scale(conf["l"], p, 40.0)
    delta = _auto_scale(conf["delta"], p, 20.0, allow_none=True)
    hypers = ModelHypers(
        gp=GpHypers(b=conf["b"], rho=conf["rho"], length_scale=length),
        sigma2=conf["sigma2"],
        delta=delta,
        link=conf["link"],
    )
    grid = LocationGrid.regular_1d(p)
    seq = np.random.SeedSequence(entropy=conf["seed"], spawn_key=(1,))
    kids = seq.spawn(2)
    _, w = sample_prior(hypers, grid, kids[0], fourier_tol=conf["tol_fourier"])
    data = sample_dataset(w, n, conf["sigma2"], kids[1], grid=grid)
    dio.write_dataset(conf["out"], data)
    meta = dio.format_result(
        {
            "kind": "synth-meta",
            "seed": conf["seed"],
            "p": p,
            "n": n,
            "sigma2": conf["sigma2"],
            "b": conf["b"],
            "rho": conf["rho"],
            "length_scale": length,
            "delta": "none" if delta is None else delta,
            "link": conf["link"],
            "tol_fourier": conf["tol_fourier"],
        },
        {},
    )
    dio.atomic_write_text(conf["out"] + ".meta", meta)
    return EXIT_OK


def _fit_one(data: Dataset, conf: dict) -> tuple[np.ndarray, dict, bool, list]:
    """Dispatch one estimator; returns (weights, fitted-hypers, converged, trace rows)."""
    name = conf["estimator"]
    seed = conf["seed"]
    if name in ("drd-laplace", "sdrd-laplace"):
        smooth = name.startswith("sdrd")
        cfgs = default_eb_configs(
            data, smooth=smooth, link=conf["link"],
            restarts=conf["restarts"], fourier_tol=conf["tol_fourier"],
        )
        best = None
        for cfg in cfgs:
            fit = fit_empirical_bayes(data, cfg)
            score = fit.trace[-1]["objective_end"] if fit.trace else -np.inf
            if best is None or score > best[0]:
                best = (score, fit)
        fit = best[1]
        hyp = fit.hypers
        fitted = {
            "sigma2": hyp.sigma2,
            "b": hyp.gp.b,
            "rho": hyp.gp.rho,
            "length_scale": hyp.gp.length_scale,
        }
        if hyp.delta is not None:
            fitted["delta"] = hyp.delta
        trace = [
            (t["iter"], t["objective_start"], t["objective_end"], t["theta_change"])
            for t in fit.trace
        ]
        return fit.w, fitted, fit.converged, trace
    if name == "drd-convex":
        cfg = default_eb_configs(
            data, smooth=False, link="exp",
            restarts=conf["restarts"], fourier_tol=conf["tol_fourier"],
        )[0]
        eb = fit_empirical_bayes(data, cfg)
        res = fit_convex(data, eb.hypers)
        cov = build_covariance(res.u, eb.hypers, data.grid)
        w = conditional_posterior(data, cov, eb.hypers.sigma2).mean
        fitted = {
            "sigma2": eb.hypers.sigma2,
            "b": eb.hypers.gp.b,
            "rho": eb.hypers.gp.rho,
            "length_scale": eb.hypers.gp.length_scale,
        }
        trace = [(i, v, v, 0.0) for i, v in enumerate(res.trace)]
        return w, fitted, res.converged, trace
    if name in ("drd-mcmc", "sdrd-mcmc"):
        smooth = name.startswith("sdrd")
        res = run_gibbs(
            data,
            HyperPriors(),
            ChainConfig(
                n_samples=conf["mcmc_samples"],
                burn_in_max=conf["burn_in_max"],
                seed=seed,
                fourier_tol=conf["tol_fourier"],
            ),
            kind="smooth-drd" if smooth else "drd",
            link=conf["link"],
        )
        w, _ = posterior_mean_weights(res.samples, data)
        fitted = {
            "sigma2": float(np.mean([s.hypers.sigma2 for s in res.samples])),
            "b": float(np.mean([s.hypers.gp.b for s in res.samples])),
            "rho": float(np.mean([s.hypers.gp.rho for s in res.samples])),
            "length_scale": float(
                np.mean([s.hypers.gp.length_scale for s in res.samples])
            ),
            "burn_in_sweeps": res.burn_in_sweeps,
        }
        if smooth:
            fitted["delta"] = float(np.mean([s.hypers.delta for s in res.samples]))
        trace = [(i, s.log_post, s.log_post, 0.0) for i, s in enumerate(res.samples)]
        return w, fitted, res.burned_in, trace
    if name == "ard":
        res = ard_fit(data)
        return res.w, {"sigma2": res.hyper["sigma2"]}, True, []
    if name == "asd":
        res = asd_fit(data)
        return res.w, dict(res.hyper), True, []
    if name == "lasso":
        res = lasso_fit(data, folds=conf["folds"], seed=seed)
        return res.w, {"lambda": res.hyper["lambda"]}, True, []
    raise ValueError(f"unknown estimator {name!r}")


def cmd_fit(conf: dict) -> int:
    if conf["out"] is None:
        raise ValueError("--out is required")
    data = dio.read_dataset(conf["data"])
    imported = conf.get("import_weights") or []
    import_map = {}
    for item in imported:
        if "=" not in item:
            raise ValueError("--import-weights expects METHOD=CSV")
        method, path = item.split("=", 1)
        import_map[method] = dio.import_weights_csv(path, data.p)

    t0 = time.perf_counter()
    if conf["estimator"] in import_map:
        w = import_map[conf["estimator"]]
        fitted, converged, trace = {}, True, []
    else:
        w, fitted, converged, trace = _fit_one(data, conf)
    wall = time.perf_counter() - t0

    header = {
        "kind": "fit-result",
        "estimator": conf["estimator"],
        "seed": conf["seed"],
        "n": data.n,
        "p": data.p,
        "converged": int(bool(converged)),
        "wall_time_s": wall,
    }
    header.update(fitted)
    sections = {
        "config": [(k, v) for k, v in sorted(conf.items()) if k != "import_weights"],
        "weights": [float(v) for v in w],
    }
    if trace:
        sections["trace"] = trace
    if data.w_true is not None:
        from .bench import metric_auc, metric_r2

        sections["metrics"] = [
            ("r2_w", metric_r2(data.w_true, w)),
            ("auc", metric_auc(data.w_true, w)),
        ]
    dio.atomic_write_text(conf["out"], dio.format_result(header, sections))
    return EXIT_OK


def cmd_phase(conf: dict) -> int:
    if conf["out"] is None:
        raise ValueError("--out is required")
    gammas = (
        _parse_float_list(conf["gammas"])
        if conf["gammas"]
        else tuple(np.round(np.linspace(0.05, 1.0, 20), 4))
    )
    config = PhaseConfig(
        p=conf["p"],
        alphas=_parse_float_list(conf["alphas"]),
        gammas=gammas,
        g=conf["g"],
        smooth_len=conf["smooth_len"],
        trials=conf["trials"],
        r2_threshold=conf["threshold"],
        seed=conf["seed"],
    )
    names = [s.strip() for s in conf["solvers"].split(",") if s.strip()]
    solvers = make_estimators(names, seed=conf["seed"])
    result = run_phase_grid(config, solvers)
    header = {
        "kind": "phase-result",
        "seed": conf["seed"],
        "p": conf["p"],
        "g": conf["g"],
        "smooth_len": conf["smooth_len"],
        "trials": conf["trials"],
        "r2_threshold": conf["threshold"],
    }
    cell_rows = []
    for name, cells in result.cells.items():
        for c in cells:
            cell_rows.append(
                (name, c.alpha, c.gamma, c.successes, c.trials, c.classification)
            )
    center_rows = []
    for name, centers in result.centers.items():
        for alpha, center in sorted(centers.items()):
            center_rows.append((name, alpha, center))
    dio.atomic_write_text(
        conf["out"],
        dio.format_result(header, {"cells": cell_rows, "centers": center_rows}),
    )
    return EXIT_OK


def cmd_bench(conf: dict) -> int:
    if conf["out"] is None:
        raise ValueError("--out is required")
    config = RuntimeConfig(
        p_values=_parse_int_list(conf["p_values"]),
        n_values=_parse_int_list(conf["n_values"]),
        reps=conf["reps"],
        estimators=tuple(s.strip() for s in conf["estimators"].split(",") if s.strip()),
        seed=conf["seed"],
        sigma2=conf["sigma2"],
    )
    records = run_runtime_bench(config)
    header = {
        "kind": "bench-result",
        "seed": conf["seed"],
        "weight_tol": config.weight_tol,
        "reps": config.reps,
    }
    rows = [
        (r.estimator, r.p, r.n, r.rep, r.seconds, r.stopping.replace(" ", "_"))
        for r in records
    ]
    dio.atomic_write_text(conf["out"], dio.format_result(header, {"records": rows}))
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, SYNTH_DEFAULTS),
    "fit": (cmd_fit, FIT_DEFAULTS),
    "phase": (cmd_phase, PHASE_DEFAULTS),
    "bench": (cmd_bench, BENCH_DEFAULTS),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command, defaults = COMMANDS[args.command]
    try:
        conf = _resolve(args, defaults)
        if args.command == "fit":
            conf["data"] = args.data
            conf["import_weights"] = args.import_weights
        _ = conf  # full validation happens inside the command constructors
    except (ValueError, dio.FormatError) as exc:
        print(f"drdreg: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return command(conf)
    except (ValueError, dio.FormatError) as exc:
        print(f"drdreg: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PSDError as exc:
        print(f"drdreg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"drdreg: i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
