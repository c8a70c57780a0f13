"""Command-line front-end: simulate, fit, transfer, detect, distributed, bench."""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from .core import CoefVector, DataValidationError, Dataset, NumericalBlowupError
from .detection import DetectionParams, trans_sqr, transferability_indices
from .distributed import DistributedParams, SiteHandle, distributed_oracle_trans_sqr
from .io import (
    ConfigError,
    fmt_real,
    load_csv,
    load_experiment_config,
    scenario_settings,
    write_manifest,
    write_results_csv,
    write_summary_csv,
    write_timing_csv,
)
from .selection import CvConfig, cv_select, default_bandwidth
from .simulation import ResultsTable, run_experiment
from .smoothing import Kernel
from .solver import FitConfig, fit_l1_sqr
from .transfer import TransferParams, oracle_trans_sqr

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _write_coef_csv(path, columns: dict[str, CoefVector]):
    names = list(columns)
    p = next(iter(columns.values())).p
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["term"] + names)
        writer.writerow(["intercept"] + [fmt_real(c.intercept) for c in columns.values()])
        for j in range(p):
            writer.writerow([f"x{j + 1}"] + [fmt_real(c.slopes[j]) for c in columns.values()])


def _standardize(data: Dataset):
    m = data.X.mean(axis=0)
    sd = data.X.std(axis=0)
    if np.any(sd == 0):
        raise DataValidationError("cannot standardize a constant covariate column")
    return Dataset((data.X - m) / sd, data.y, data.site_id), m, sd


def _destandardize(coef: CoefVector, m, sd) -> CoefVector:
    slopes = coef.slopes / sd
    return CoefVector(coef.intercept - float(m @ slopes), slopes)


def _cmd_simulate(args) -> int:
    scenarios = load_experiment_config(args.config)
    overrides = {}
    if args.tau is not None:
        overrides["tau"] = args.tau
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threshold is not None:
        overrides["threshold"] = args.threshold
    if args.rho0 is not None:
        overrides["rho0"] = args.rho0
    if args.iters is not None:
        overrides["dist_T"] = args.iters
    if overrides:
        from dataclasses import replace

        scenarios = [replace(c, **overrides) for c in scenarios]

    out = Path(args.out)
    table = ResultsTable()
    failed = False
    try:
        for cfg in scenarios:
            sub = run_experiment(cfg, jobs=args.jobs)
            for row in sub.rows:
                table.append(row)
    except Exception as exc:
        print(f"error: scenario run failed: {exc}", file=sys.stderr)
        failed = True
    write_results_csv(table, out, failed=failed)
    write_timing_csv(table, out.with_suffix(".timing.csv"))
    write_summary_csv(table, out.with_suffix(".summary.csv"))
    settings = {"config": args.config, "jobs": args.jobs, "scenarios": len(scenarios)}
    for i, cfg in enumerate(scenarios):
        for k, v in scenario_settings(cfg).items():
            settings[f"scenario{i}.{k}"] = v
    write_manifest(out.with_suffix(".manifest.txt"), "simulate", settings)
    return EXIT_NUMERIC if failed else EXIT_OK


def _fit_params(args, data: Dataset):
    h = args.bandwidth if args.bandwidth is not None else default_bandwidth(
        args.tau, data.n, data.p
    )
    return h


def _cmd_fit(args) -> int:
    data = load_csv(args.data)
    fit_data, m, sd = (data, None, None)
    if args.standardize:
        fit_data, m, sd = _standardize(data)
    h = _fit_params(args, fit_data)
    cfg = FitConfig(tau=args.tau, h=h, lam=args.lam or 0.0, kernel=Kernel(args.kernel))
    lam = args.lam
    if lam is None:
        lam, _ = cv_select(fit_data, cfg, CvConfig(seed=args.seed))
        cfg = FitConfig(tau=args.tau, h=h, lam=lam, kernel=Kernel(args.kernel))
    fit = fit_l1_sqr(fit_data, cfg)
    coef = fit.coef if not args.standardize else _destandardize(fit.coef, m, sd)
    out = Path(args.out)
    _write_coef_csv(out, {"coef": coef})
    write_manifest(
        out.with_suffix(".manifest.txt"),
        "fit",
        {
            "data": args.data, "tau": args.tau, "seed": args.seed,
            "bandwidth": fmt_real(h), "lambda": fmt_real(lam),
            "lambda_source": "flag" if args.lam is not None else "cv",
            "kernel": args.kernel, "standardize": args.standardize,
            "iterations": fit.iterations, "kkt_gap": fmt_real(fit.kkt_gap),
            "converged": fit.converged,
        },
    )
    print(f"fit: lambda={lam:.6g} h={h:.6g} iterations={fit.iterations} "
          f"kkt_gap={fit.kkt_gap:.3g}")
    return EXIT_OK


def _load_task(args):
    target = load_csv(args.target)
    sources = [load_csv(s) for s in args.source]
    return target, sources


def _transfer_params(args) -> TransferParams:
    return TransferParams(
        tau=args.tau,
        kernel=Kernel(args.kernel),
        seed=args.seed,
        lambda_w=args.lam,
        lambda_delta=args.lam,
        h_w=args.bandwidth,
        h_delta=args.bandwidth,
        selection="fixed" if args.lam is not None else "cv",
    )


def _cmd_transfer(args) -> int:
    target, sources = _load_task(args)
    est = oracle_trans_sqr(target, sources, _transfer_params(args))
    out = Path(args.out)
    _write_coef_csv(out, {"w_hat": est.w_hat, "delta_hat": est.delta_hat,
                          "beta_hat": est.beta_hat})
    write_manifest(
        out.with_suffix(".manifest.txt"),
        "transfer",
        {
            "target": args.target, "sources": ",".join(args.source),
            "tau": args.tau, "seed": args.seed, "kernel": args.kernel,
            "lambda_w": fmt_real(est.lambda_w), "lambda_delta": fmt_real(est.lambda_delta),
            "h_w": fmt_real(est.h_w), "h_delta": fmt_real(est.h_delta),
        },
    )
    print(f"transfer: lambda_w={est.lambda_w:.6g} lambda_delta={est.lambda_delta:.6g}")
    return EXIT_OK


def _cmd_detect(args) -> int:
    target, sources = _load_task(args)
    params = DetectionParams(
        threshold=args.threshold, tau=args.tau, kernel=Kernel(args.kernel), seed=args.seed
    )
    est, report = trans_sqr(target, sources, params, _transfer_params(args))
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "T_hat", "detected"])
        for k, t_hat in enumerate(report.T_hat, start=1):
            writer.writerow([k, fmt_real(t_hat), int(k in report.detected_set)])
    _write_coef_csv(out.with_suffix(".coef.csv"), {"beta_hat": est.beta_hat})
    write_manifest(
        out.with_suffix(".manifest.txt"),
        "detect",
        {
            "target": args.target, "sources": ",".join(args.source),
            "tau": args.tau, "seed": args.seed, "threshold": args.threshold,
            "benchmark_loss": fmt_real(report.benchmark_loss),
            "detected_set": ",".join(str(k) for k in sorted(report.detected_set)),
        },
    )
    detected = sorted(report.detected_set)
    for k, t_hat in enumerate(report.T_hat, start=1):
        print(f"T_hat[{k}] = {t_hat:.6g}")
    print(f"detected set: {detected if detected else '{}'}")
    return EXIT_OK


def _cmd_distributed(args) -> int:
    target, sources = _load_task(args)
    params = DistributedParams(
        rho0=args.rho0, T=args.iters, tau=args.tau, kernel=Kernel(args.kernel),
        seed=args.seed, h_w=args.bandwidth, lambda_w=args.lam,
    )
    est, stats = distributed_oracle_trans_sqr(
        SiteHandle(target), [SiteHandle(s) for s in sources], params
    )
    out = Path(args.out)
    _write_coef_csv(out, {"w_hat": est.w_hat, "delta_hat": est.delta_hat,
                          "beta_hat": est.beta_hat})
    with open(out.with_suffix(".comm.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site", "round", "bytes"])
        for sid, per_round in stats.bytes_sent.items():
            for t, b in enumerate(per_round, start=1):
                writer.writerow([sid, t, b])
    write_manifest(
        out.with_suffix(".manifest.txt"),
        "distributed",
        {
            "target": args.target, "sources": ",".join(args.source),
            "tau": args.tau, "seed": args.seed, "rho0": args.rho0,
            "rounds": stats.rounds, "pilot_bytes": stats.pilot_bytes,
        },
    )
    print(f"distributed: rounds={stats.rounds} pilot_bytes={stats.pilot_bytes}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    from ._rng import make_rng, standard_normal

    rng = make_rng(args.seed)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "p", "lambda", "seconds", "iterations", "kkt_gap"])
        for n, p in zip(args.n, args.p):
            X = standard_normal(rng, (n, p))
            beta = np.zeros(p)
            beta[: min(5, p)] = 1.0
            y = X @ beta + standard_normal(rng, n)
            data = Dataset(X, y)
            h = default_bandwidth(args.tau, n, p)
            lam = 0.5 * default_bandwidth(args.tau, n, p) * np.sqrt(np.log(p) / n)
            cfg = FitConfig(tau=args.tau, h=h, lam=lam)
            start = time.perf_counter()
            fit = fit_l1_sqr(data, cfg)
            secs = time.perf_counter() - start
            writer.writerow([n, p, fmt_real(lam), fmt_real(secs),
                             fit.iterations, fmt_real(fit.kkt_gap)])
            print(f"bench: n={n} p={p} seconds={secs:.4f} iterations={fit.iterations}")
    write_manifest(out.with_suffix(".manifest.txt"), "bench",
                   {"n": args.n, "p": args.p, "tau": args.tau, "seed": args.seed})
    return EXIT_OK


def _add_common(p, *, tau=0.5):
    p.add_argument("--tau", type=float, default=tau, help="quantile level in (0,1)")
    p.add_argument("--seed", type=int, default=0, help="base PRNG seed")
    p.add_argument("--kernel", choices=[k.value for k in Kernel], default="gaussian")
    p.add_argument("--bandwidth", type=float, default=None,
                   help="override the default bandwidth rule")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="fixed penalty instead of CV")
    p.add_argument("--out", default="results.csv", help="output CSV path")


def build_parser() -> _Parser:
    parser = _Parser(prog="transqr",
                     description="Transfer learning for penalized smoothed quantile regression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a Monte-Carlo experiment from a config file")
    p.add_argument("--config", required=True, help="TOML experiment file")
    p.add_argument("--out", default="results.csv")
    p.add_argument("--jobs", type=int, default=1, help="parallel replication workers")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--rho0", type=float, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="l1-penalized smoothed quantile fit on a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--standardize", action="store_true",
                   help="standardize covariates; slopes are rescaled back on output")
    _add_common(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("transfer", help="two-step transfer fit over CSV studies")
    p.add_argument("--target", required=True)
    p.add_argument("--source", action="append", default=[], help="repeatable source CSV")
    _add_common(p)
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("detect", help="score source transferability, then transfer")
    p.add_argument("--target", required=True)
    p.add_argument("--source", action="append", required=True, help="repeatable source CSV")
    p.add_argument("--threshold", type=float, default=0.2)
    _add_common(p)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("distributed", help="communication-efficient transfer over CSV sites")
    p.add_argument("--target", required=True)
    p.add_argument("--source", action="append", default=[], help="repeatable source CSV")
    p.add_argument("--rho0", type=float, default=0.2)
    p.add_argument("--iters", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_distributed)

    p = sub.add_parser("bench", help="time solver fits on synthetic problems")
    p.add_argument("--n", type=int, nargs="+", default=[500, 1000])
    p.add_argument("--p", type=int, nargs="+", default=[100, 500])
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalBlowupError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
