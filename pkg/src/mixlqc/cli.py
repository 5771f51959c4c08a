"""Command-line entry point: estimation, control, and reproduction pipelines.

Configs are JSON documents mirroring :class:`~mixlqc.harness.ExperimentConfig`;
missing keys take the built-in benchmark defaults, unknown keys are rejected.
Summary CSV goes to stdout, human framing to stderr, and all artifacts are
written atomically. Exit codes: 0 success, 1 config error, 2 when any method
hits solver fallbacks on more than 5 percent of its episodes.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .controller import SolverOptions
from .ellipsoid import NON_SYMMETRIC_90_10, SAMPLING_SCHEMES, UNIFORM_BALL
from .filters import QK_CORRECTED, QK_FORMULAS
from .harness import (
    ALL_METHODS,
    CONTROL_METHODS,
    ESTIMATION_METHODS,
    ExperimentConfig,
    merge_benchmarks,
    run_benchmark,
    summary_csv_text,
    write_benchmark_outputs,
)

FAILURE_RATE_LIMIT = 0.05


class ConfigError(ValueError):
    """Configuration file problem; the message names the offending key."""


DEFAULT_CONFIG = {
    "model": {
        "a0": [[0.6, 0.7], [0.25, 0.5]],
        "a_modulation": "sin",
        "b": [[1.0], [0.3]],
        "h": [[0.2, 1.0]],
    },
    "noise": {
        "pw": [[0.25, 0.0], [0.0, 0.25]],
        "pv": [[0.25]],
        "mw": [[5.0, 2.0], [2.0, 5.0]],
        "mv": [[5.0]],
        "scheme_w": NON_SYMMETRIC_90_10,
        "scheme_v": UNIFORM_BALL,
    },
    "init": {
        "x0_hat": [60.0, -45.0],
        "p0": [[100.0, 0.0], [0.0, 100.0]],
        "m0": [[400.0, 0.0], [0.0, 400.0]],
    },
    "cost": {
        "q": [[10.0, 0.0], [0.0, 1.0]],
        "r": [[1.0]],
        "n_total": 100,
        "n_receding": 5,
    },
    "runs": 50,
    "seed": 1234,
    "qk_formula": QK_CORRECTED,
    "solver": {
        "feasibility_tol": 1e-8,
        "objective_tol": 1e-6,
        "max_iterations": 200,
    },
}


def _reject_unknown(doc: dict, allowed, path: str):
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown key {path}{key}")


def _merge_defaults(user: dict) -> dict:
    merged = copy.deepcopy(DEFAULT_CONFIG)
    _reject_unknown(user, DEFAULT_CONFIG.keys(), "")
    for key, value in user.items():
        if isinstance(DEFAULT_CONFIG[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be an object")
            _reject_unknown(value, DEFAULT_CONFIG[key].keys(), f"{key}.")
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


def _matrix(value, rows, cols, key) -> np.ndarray:
    if np.isscalar(value):
        if rows == cols:
            mat = float(value) * np.eye(rows)
        elif rows == 1 or cols == 1:
            mat = np.full((rows, cols), float(value))
        else:
            raise ConfigError(f"{key} must be a {rows}x{cols} matrix")
    else:
        mat = np.asarray(value, dtype=float)
        if mat.ndim == 1:
            mat = mat.reshape(rows, cols) if rows * cols == mat.size else mat
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape != (rows, cols):
        raise ConfigError(f"{key} has shape {mat.shape}, expected ({rows}, {cols})")
    return mat


def _vector(value, length, key) -> np.ndarray:
    vec = np.atleast_1d(np.asarray(value, dtype=float))
    if vec.shape != (length,):
        raise ConfigError(f"{key} has length {vec.size}, expected {length}")
    return vec


def _psd(mat: np.ndarray, key: str) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    if float(np.abs(mat - mat.T).max(initial=0.0)) > 1e-10:
        raise ConfigError(f"{key} not symmetric")
    if float(np.linalg.eigvalsh(sym).min()) < -1e-10:
        raise ConfigError(f"{key} not positive semidefinite")
    return sym


def _positive_int(value, key, minimum=1) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ConfigError(f"{key} must be an integer >= {minimum}")
    return value


def config_from_dict(user: dict) -> ExperimentConfig:
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    doc = _merge_defaults(user)
    model = doc["model"]
    a0 = np.atleast_2d(np.asarray(model["a0"], dtype=float))
    if a0.ndim != 2 or a0.shape[0] != a0.shape[1]:
        raise ConfigError("model.a0 must be a square matrix")
    n = a0.shape[0]
    if model["a_modulation"] not in ("sin", "none"):
        raise ConfigError("model.a_modulation must be 'sin' or 'none'")
    b = np.atleast_2d(np.asarray(model["b"], dtype=float))
    if b.shape[0] != n:
        raise ConfigError(f"model.b has {b.shape[0]} rows, expected {n}")
    h = np.atleast_2d(np.asarray(model["h"], dtype=float))
    if h.shape[1] != n:
        raise ConfigError(f"model.h has {h.shape[1]} columns, expected {n}")
    m = h.shape[0]
    r = b.shape[1]

    noise = doc["noise"]
    pw = _psd(_matrix(noise["pw"], n, n, "noise.pw"), "noise.pw")
    pv = _psd(_matrix(noise["pv"], m, m, "noise.pv"), "noise.pv")
    mw = _psd(_matrix(noise["mw"], n, n, "noise.mw"), "noise.mw")
    mv = _psd(_matrix(noise["mv"], m, m, "noise.mv"), "noise.mv")
    for scheme_key in ("scheme_w", "scheme_v"):
        if noise[scheme_key] not in SAMPLING_SCHEMES:
            raise ConfigError(f"noise.{scheme_key} must be one of {sorted(SAMPLING_SCHEMES)}")

    init = doc["init"]
    x0_hat = _vector(init["x0_hat"], n, "init.x0_hat")
    p0 = _psd(_matrix(init["p0"], n, n, "init.p0"), "init.p0")
    m0 = _psd(_matrix(init["m0"], n, n, "init.m0"), "init.m0")

    cost = doc["cost"]
    q = _psd(_matrix(cost["q"], n, n, "cost.q"), "cost.q")
    rmat = _matrix(cost["r"], r, r, "cost.r")
    rmat = _psd(rmat, "cost.r")
    if float(np.linalg.eigvalsh(rmat).min()) <= 0.0:
        raise ConfigError("cost.r not positive definite")
    n_total = _positive_int(cost["n_total"], "cost.n_total")
    n_receding = _positive_int(cost["n_receding"], "cost.n_receding")

    runs = _positive_int(doc["runs"], "runs")
    seed = doc["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if doc["qk_formula"] not in QK_FORMULAS:
        raise ConfigError(f"qk_formula must be one of {sorted(QK_FORMULAS)}")
    solver_doc = doc["solver"]
    solver = SolverOptions(
        feasibility_tol=float(solver_doc["feasibility_tol"]),
        objective_tol=float(solver_doc["objective_tol"]),
        max_iterations=_positive_int(solver_doc["max_iterations"], "solver.max_iterations"),
    )
    return ExperimentConfig(
        a0=a0,
        a_modulation=model["a_modulation"],
        b=b,
        h=h,
        pw=pw,
        pv=pv,
        mw=mw,
        mv=mv,
        scheme_w=noise["scheme_w"],
        scheme_v=noise["scheme_v"],
        x0_hat=x0_hat,
        p0=p0,
        m0=m0,
        q=q,
        r=rmat,
        n_total=n_total,
        n_receding=n_receding,
        runs=runs,
        seed=seed,
        qk_formula=doc["qk_formula"],
        solver=solver,
    )


def parse_config(path: str) -> ExperimentConfig:
    """Read a JSON config file; missing keys default to the benchmark scenario."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def serialize_config(cfg: ExperimentConfig) -> dict:
    """Canonical dict form of a config; inverse of :func:`config_from_dict`."""
    return {
        "model": {
            "a0": cfg.a0.tolist(),
            "a_modulation": cfg.a_modulation,
            "b": cfg.b.tolist(),
            "h": cfg.h.tolist(),
        },
        "noise": {
            "pw": cfg.pw.tolist(),
            "pv": cfg.pv.tolist(),
            "mw": cfg.mw.tolist(),
            "mv": cfg.mv.tolist(),
            "scheme_w": cfg.scheme_w,
            "scheme_v": cfg.scheme_v,
        },
        "init": {
            "x0_hat": cfg.x0_hat.tolist(),
            "p0": cfg.p0.tolist(),
            "m0": cfg.m0.tolist(),
        },
        "cost": {
            "q": cfg.q.tolist(),
            "r": cfg.r.tolist(),
            "n_total": cfg.n_total,
            "n_receding": cfg.n_receding,
        },
        "runs": cfg.runs,
        "seed": cfg.seed,
        "qk_formula": cfg.qk_formula,
        "solver": {
            "feasibility_tol": cfg.solver.feasibility_tol,
            "objective_tol": cfg.solver.objective_tol,
            "max_iterations": cfg.solver.max_iterations,
        },
    }


def _parse_methods(raw: str, allowed, flag_name: str):
    methods = [part.strip() for part in raw.split(",") if part.strip()]
    if not methods:
        raise ConfigError(f"{flag_name} must name at least one method")
    for method in methods:
        if method not in allowed:
            raise ConfigError(f"{flag_name}: unknown method {method!r} (allowed: {', '.join(allowed)})")
    return methods


def _add_common_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON config file; defaults to the built-in scenario")
    parser.add_argument("--out", default="results", help="output directory for CSV artifacts")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--runs", type=int, help="episode count override")
    parser.add_argument("--methods", help="comma-separated method list")
    parser.add_argument(
        "--qk-formula", choices=list(QK_FORMULAS), dest="qk_formula", help="set-mixing parameter variant"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixlqc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    est = sub.add_parser("estimate", help="open-loop estimation comparison")
    ctl = sub.add_parser("control", help="closed-loop regulation comparison")
    rep = sub.add_parser("reproduce", help="run the benchmark defaults and print the metrics table")
    rep.add_argument("--table", type=int, choices=(1, 2), help="1 = estimation, 2 = control; default both")
    for p in (est, ctl, rep):
        _add_common_flags(p)
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        cfg = replace(cfg, seed=args.seed)
    if args.runs is not None:
        if args.runs < 1:
            raise ConfigError("runs must be a positive integer")
        cfg = replace(cfg, runs=args.runs)
    if args.qk_formula is not None:
        cfg = replace(cfg, qk_formula=args.qk_formula)
    return cfg


def run(args) -> int:
    """Execute a parsed invocation; returns the process exit code."""
    try:
        cfg = parse_config(args.config) if args.config else config_from_dict({})
        cfg = _apply_overrides(cfg, args)
        if args.command == "estimate":
            methods = _parse_methods(args.methods, ESTIMATION_METHODS, "--methods") if args.methods else list(ESTIMATION_METHODS)
            pipelines = [(cfg, methods)]
        elif args.command == "control":
            methods = _parse_methods(args.methods, CONTROL_METHODS, "--methods") if args.methods else list(CONTROL_METHODS)
            pipelines = [(cfg, methods)]
        else:
            tables = (args.table,) if args.table else (1, 2)
            pipelines = []
            for table in tables:
                if table == 1:
                    tcfg = cfg if args.runs is not None else replace(cfg, runs=50)
                    methods = list(ESTIMATION_METHODS)
                else:
                    tcfg = cfg if args.runs is not None else replace(cfg, runs=100)
                    methods = list(CONTROL_METHODS)
                if args.methods:
                    allowed = ESTIMATION_METHODS if table == 1 else CONTROL_METHODS
                    requested = [m for m in _parse_methods(args.methods, ALL_METHODS, "--methods") if m in allowed]
                    if requested:
                        methods = requested
                    elif len(tables) == 1:
                        raise ConfigError(f"--methods names no method valid for table {table}")
                    else:
                        continue
                pipelines.append((tcfg, methods))
        if not pipelines:
            raise ConfigError("nothing to run for the requested methods")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    results = []
    for pcfg, methods in pipelines:
        print(f"running {pcfg.runs} episodes for methods {', '.join(methods)}", file=sys.stderr)
        results.append(run_benchmark(pcfg, methods))
    combined = merge_benchmarks(results) if len(results) > 1 else results[0]
    write_benchmark_outputs(args.out, combined)
    sys.stdout.write(summary_csv_text(combined.metrics))
    print(f"artifacts written to {args.out}", file=sys.stderr)

    worst = 0.0
    for method in combined.episodes:
        rate = combined.failure_rate(method)
        worst = max(worst, rate)
        if rate > 0.0:
            print(f"{method}: solver fallback rate {rate:.1%}", file=sys.stderr)
    if worst > FAILURE_RATE_LIMIT:
        print(f"failure rate above {FAILURE_RATE_LIMIT:.0%}", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
