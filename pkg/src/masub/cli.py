"""Command-line interface: ``fit``, ``simulate`` and ``gen-data``.

Exit status is 0 on success, 2 for bad input or configuration and 3 for a
named numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .data import CsvDataset, DataError
from .harness import (ConfigError, ReplicationAborted, ScenarioConfig, builtin_scenario,
                      generate_chunks, run_replications, write_report_csv, write_rmse_svg)
from .model import make_model
from .numerics import NumericalError
from .pipeline import fit

logger = logging.getLogger("masub")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
SCHEMA_VERSION = 1

FIT_KEYS = {"model", "data", "response", "n", "pilot", "estimator", "moment", "design", "jitter"}
GEN_KEYS = {"model", "p", "theta0", "N", "output"}
SIM_KEYS = {"scenario", "full", "svg", "replications", "n", "ns", "N", "n0", "fresh_dataset",
            "model", "p", "theta0", "estimators"}
GLOBAL_KEYS = {"seed", "threads", "out"}


class InputError(Exception):
    """Bad command-line arguments or configuration."""


def _default_threads():
    return os.cpu_count() or 1


def build_parser():
    parser = argparse.ArgumentParser(prog="masub", description="Moment-assisted subsampling estimators.")
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker count for data passes and replications (default: all cores)")
    parser.add_argument("--config", default=None, help="JSON file with command options")
    parser.add_argument("--out", default=None, help="output directory (default: current directory)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to a CSV file")
    p.add_argument("--model", choices=["logistic", "weibull"])
    p.add_argument("--data", help="input CSV with a header row")
    p.add_argument("--response", help="name of the response column")
    p.add_argument("--n", type=float, help="expected main subsample size")
    p.add_argument("--pilot", type=int, help="expected pilot size; 0 runs without a pilot (default 200)")
    p.add_argument("--estimator", choices=["uni", "ipw", "mscl"])
    p.add_argument("--moment", choices=["none", "xy", "opt"])
    p.add_argument("--design", choices=["uniform", "scorenorm"],
                   help="sampling plan (default: uniform for uni, scorenorm otherwise)")
    p.add_argument("--jitter", action="store_true", default=None,
                   help="regularise a singular Omega22 block instead of failing")

    s = sub.add_parser("simulate", help="run a replication study")
    s.add_argument("--scenario", help="built-in scenario: logistic-paper or weibull-paper")
    scale = s.add_mutually_exclusive_group()
    scale.add_argument("--desk", dest="full", action="store_false", default=None,
                       help="desk scale: N=1e5, 200 replications (default)")
    scale.add_argument("--full", dest="full", action="store_true",
                       help="full scale: N=1e6, 1000 replications")
    s.add_argument("--replications", type=int)
    s.add_argument("--n", type=int, help="subsample size reported in the CSV")
    s.add_argument("--svg", action="store_true", default=None, help="also write an RMSE-vs-n chart")

    g = sub.add_parser("gen-data", help="write a synthetic CSV dataset")
    g.add_argument("--model", choices=["logistic", "weibull"])
    g.add_argument("--p", type=int, help="covariate count (default 9)")
    g.add_argument("--theta0", help="comma-separated true parameter (default: reference values)")
    g.add_argument("--N", type=int, help="number of records")
    g.add_argument("--output", help="file name inside --out (default data.csv)")
    return parser


def load_config(path, command):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise InputError("config must be a JSON object")
    allowed = GLOBAL_KEYS | {"fit": FIT_KEYS, "simulate": SIM_KEYS, "gen-data": GEN_KEYS}[command]
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise InputError(f"unknown config keys for {command}: {', '.join(unknown)}")
    return cfg


def merged(args, cfg, keys):
    """Command-line values override config values; ``None`` means unset."""
    out = {k: cfg[k] for k in keys if k in cfg}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _ensure_out(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise InputError(f"output directory {path} is not writable")
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def format_table(names, result):
    lines = [f"{result.estimator}",
             f"{'coordinate':<12}{'theta_mas':>14}{'std_error':>14}{'theta_tilde':>14}"]
    for j, name in enumerate(names):
        lines.append(f"{name:<12}{result.theta_mas[j]:>14.6f}{result.std_errors[j]:>14.6f}"
                     f"{result.theta_tilde[j]:>14.6f}")
    return "\n".join(lines)


def cmd_fit(args, cfg, seed, threads, out):
    opts = merged(args, cfg, FIT_KEYS)
    for key in ("model", "data", "response", "n"):
        if key not in opts:
            raise InputError(f"fit needs --{key}")
    if not os.path.isfile(opts["data"]):
        raise InputError(f"data file not found: {opts['data']}")
    out = _ensure_out(out)
    dataset = CsvDataset(opts["data"], opts["response"])
    model = make_model(opts["model"], dataset.p)
    dataset.validate = model.check_observations
    kind = opts.get("estimator", "uni")
    moment = opts.get("moment", "opt")
    n0 = int(opts.get("pilot", 200))
    result = fit(model, dataset, float(opts["n"]), n0, kind, moment, opts.get("design"), seed=seed,
                 threads=threads, jitter=bool(opts.get("jitter", False)))
    names = model.coordinate_names()
    doc = {
        "schema": SCHEMA_VERSION,
        "estimator": result.estimator,
        "model": model.name,
        "coordinates": names,
        "covariates": dataset.covariates,
        "theta_mas": result.theta_mas,
        "theta_tilde": result.theta_tilde,
        "std_errors": result.std_errors,
        "theta_check": result.theta_check,
        "diagnostics": {**result.diagnostics, "seed": seed, "n": float(opts["n"]), "pilot": n0},
    }
    path = os.path.join(out, "result.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(format_table(names, result))
    warns = result.diagnostics.get("plan_warnings", []) + result.diagnostics.get("warnings", [])
    for w in warns:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {path}")
    return EXIT_OK


def scenario_from(opts, seed):
    overrides = {k: opts[k] for k in ("replications", "n", "ns", "N", "n0", "fresh_dataset",
                                      "theta0", "estimators") if k in opts}
    if "n" in overrides and "ns" not in overrides:
        overrides["ns"] = ()
    overrides["seed"] = seed
    if "scenario" in opts:
        for k in ("model", "p"):
            if k in opts:
                raise InputError(f"'{k}' cannot be combined with a built-in scenario")
        return builtin_scenario(opts["scenario"], full=bool(opts.get("full", False)), **overrides)
    missing = [k for k in ("model", "p", "theta0", "N", "n") if k not in opts]
    if missing:
        raise InputError(f"simulate needs --scenario or config keys {', '.join(missing)}")
    return ScenarioConfig.from_dict({**overrides, "model": opts["model"], "p": opts["p"]})


def cmd_simulate(args, cfg, seed, threads, out):
    opts = merged(args, cfg, SIM_KEYS)
    config = scenario_from(opts, seed)
    out = _ensure_out(out)
    report = run_replications(config, workers=threads)
    csv_path = os.path.join(out, "report.csv")
    write_report_csv(report, csv_path)
    meta = {
        "schema": SCHEMA_VERSION,
        "config": config.to_dict(),
        "seeds": report.seeds,
        "estimators": {
            f"{lab}@n={n}": {"successes": c.successes, "failures": c.failures,
                             "mean_time_seconds": c.mean_time, "errors": c.errors[:5]}
            for (n, lab), c in report.cells.items()},
    }
    with open(os.path.join(out, "report_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(_jsonable(meta), fh, indent=2)
        fh.write("\n")
    if opts.get("svg"):
        write_rmse_svg(report, os.path.join(out, "rmse.svg"))
    print(f"{'estimator':<16}{'mean |bias|':>12}{'mean MSD':>12}{'mean RMSE':>12}")
    for lab in config.labels:
        c = report.cell(lab)
        print(f"{lab:<16}{np.mean(np.abs(c.bias)):>12.5f}{np.mean(c.msd):>12.5f}{np.mean(c.rmse):>12.5f}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def default_theta0(model_name, p):
    if model_name == "logistic":
        return [0.0] + [0.2] * p
    return [0.5, 0.0] + [0.2] * p


def cmd_gen_data(args, cfg, seed, threads, out):
    opts = merged(args, cfg, GEN_KEYS)
    for key in ("model", "N"):
        if key not in opts:
            raise InputError(f"gen-data needs --{key}")
    p = int(opts.get("p", 9))
    theta0 = opts.get("theta0")
    if theta0 is None:
        theta0 = default_theta0(opts["model"], p)
    elif isinstance(theta0, str):
        try:
            theta0 = [float(t) for t in theta0.split(",")]
        except ValueError:
            raise InputError(f"cannot parse theta0 {theta0!r}") from None
    model = make_model(opts["model"], p)
    theta0 = model.check_theta(theta0)
    N = int(opts["N"])
    if N < 1:
        raise InputError("N must be at least 1")
    out = _ensure_out(out)
    path = os.path.join(out, opts.get("output", "data.csv"))
    try:
        fh = open(path, "w", encoding="utf-8", newline="")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from None
    with fh:
        fh.write(",".join(["y"] + [f"x{j + 1}" for j in range(p)]) + "\n")
        for X, y in generate_chunks(model, theta0, N, seed):
            # %.17g round-trips every double exactly
            np.savetxt(fh, np.column_stack([y, X]), fmt="%.17g", delimiter=",")
    print(f"wrote {N} records to {path}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "gen-data": cmd_gen_data}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.command)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        threads = args.threads if args.threads is not None else int(cfg.get("threads", _default_threads()))
        if threads < 1:
            raise InputError("--threads must be at least 1")
        out = args.out if args.out is not None else cfg.get("out", ".")
        return COMMANDS[args.command](args, cfg, seed, threads, out)
    except (InputError, DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ReplicationAborted as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
