"""Command-line interface: fit-fixed, fit-random, fit, simulate, diagnose.

Every subcommand reads a headered CSV described by column-role flags,
writes a JSON document (stdout or ``--output``), and prints a short
human-readable table.  Exit codes: 0 success, 1 usage error, 2 data
error, 3 solver non-convergence under ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .base import LmmSelectError, SolverOptions
from .data import CsvSchema, load_csv, standardize
from .fixed_effects import FixedProblem
from .gls import ProxyConfig, build_projection, build_proxy, proxy_diagnostics
from .oracles import group_subset_oracle, subset_oracle_fixed
from .penalties import PenaltySpec
from .pipeline import (PipelineTuning, _tuned_fixed, _tuned_random,
                       fit_alternating, refit_selected)
from .random_effects import RandomProblem
from .simulation import StudyConfig, report_to_dict, run_study

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NOCONV = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the interface contract is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}")


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="input CSV path")
    p.add_argument("--subject-col", required=True)
    p.add_argument("--response-col", required=True)
    p.add_argument("--fixed-cols", default="", help="comma-separated column names")
    p.add_argument("--random-cols", default="", help="comma-separated column names")
    p.add_argument("--add-fixed-intercept", action="store_true")
    p.add_argument("--add-random-intercept", action="store_true")


def _add_penalty_flags(p):
    p.add_argument("--penalty", choices=["scad", "l1", "mcp"], default="scad")
    p.add_argument("--scad-a", type=float, default=None,
                   help="shape parameter (default 3.7 for scad, 3.0 for mcp)")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="fixed regularization level; omit to tune on a grid")


def _add_proxy_flags(p):
    p.add_argument("--proxy", choices=["logn", "true-g", "custom"], default="logn")
    p.add_argument("--proxy-file", default=None,
                   help="CSV matrix for true-g / custom proxies")
    p.add_argument("--sigma2", type=float, default=None)


def _add_tuning_flags(p):
    p.add_argument("--criterion", choices=["aic", "bic", "auto"], default="auto")
    p.add_argument("--grid-size", type=int, default=50)
    p.add_argument("--grid-min-ratio", type=float, default=1e-3)


def _add_solver_flags(p):
    p.add_argument("--max-lla", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--strict", action="store_true",
                   help="exit 3 when the solver does not converge")


def _add_output_flags(p):
    p.add_argument("--output", "-o", default=None, help="write JSON here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lmmselect",
                     description="Penalized fixed/random effect selection "
                                 "for linear mixed models")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-fixed", help="penalized fixed-effects selection")
    for add in (_add_data_flags, _add_penalty_flags, _add_proxy_flags,
                _add_tuning_flags, _add_solver_flags, _add_output_flags):
        add(p)

    p = sub.add_parser("fit-random", help="group random-effects selection")
    for add in (_add_data_flags, _add_penalty_flags, _add_proxy_flags,
                _add_tuning_flags, _add_solver_flags, _add_output_flags):
        add(p)

    p = sub.add_parser("fit", help="alternating pipeline over both selectors")
    for add in (_add_data_flags, _add_penalty_flags, _add_proxy_flags,
                _add_tuning_flags, _add_solver_flags, _add_output_flags):
        add(p)
    p.add_argument("--max-rounds", type=int, default=3)
    p.add_argument("--first-random-lambda-ratio", type=float, default=None)
    p.add_argument("--refit", action="store_true",
                   help="also refit the selected model without penalties")

    p = sub.add_parser("simulate", help="Monte Carlo study on built-in scenarios")
    p.add_argument("--example", type=int, choices=[1, 2], default=1)
    p.add_argument("--N", type=int, default=30)
    p.add_argument("--ni", type=int, default=5)
    p.add_argument("--rho", type=float, default=0.3)
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--methods", default="scad-p",
                   help="comma-separated: scad-p,lasso-p,scad-t,mcp-p")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-certify", action="store_true",
                   help="skip optimality certificates (faster)")
    _add_tuning_flags(p)
    _add_output_flags(p)

    p = sub.add_parser("diagnose", help="proxy adequacy diagnostics")
    for add in (_add_data_flags, _add_proxy_flags, _add_output_flags):
        add(p)
    p.add_argument("--reference-g-file", required=True,
                   help="CSV matrix used as the reference covariance")
    p.add_argument("--reference-sigma2", type=float, default=1.0)
    p.add_argument("--active-fixed", default=None,
                   help="comma-separated fixed column names (default all)")
    p.add_argument("--active-random", default=None,
                   help="comma-separated random column names (default all)")

    p = sub.add_parser("oracle", help="brute-force reference solve (debugging)")
    for add in (_add_data_flags, _add_penalty_flags, _add_proxy_flags,
                _add_output_flags):
        add(p)
    p.add_argument("--target", choices=["fixed", "random"], required=True)

    return parser


def _schema_from_args(args) -> CsvSchema:
    fixed = tuple(c for c in args.fixed_cols.split(",") if c.strip())
    rand = tuple(c for c in args.random_cols.split(",") if c.strip())
    return CsvSchema(
        subject_col=args.subject_col,
        response_col=args.response_col,
        fixed_cols=fixed,
        random_cols=rand,
        add_fixed_intercept=args.add_fixed_intercept,
        add_random_intercept=args.add_random_intercept,
    )


def _proxy_from_args(args, parser) -> ProxyConfig:
    matrix = None
    if args.proxy_file is not None:
        matrix = np.loadtxt(args.proxy_file, delimiter=",", ndmin=2)
    if args.proxy in ("true-g", "custom") and matrix is None:
        parser.error(f"--proxy {args.proxy} requires --proxy-file")
    if args.proxy == "true-g" and args.sigma2 is None:
        parser.error("--proxy true-g requires --sigma2")
    return ProxyConfig(args.proxy, matrix, args.sigma2)


def _solver_options(args) -> SolverOptions:
    return SolverOptions(cd_tol=args.tol, group_tol=args.tol, lla_max_iter=args.max_lla)


def _penalty_from_args(args) -> PenaltySpec:
    return PenaltySpec(args.penalty, args.lam if args.lam is not None else 1.0,
                       args.scad_a)


def _emit(payload: dict, args, lines: list[str]) -> None:
    payload = dict(payload)
    payload["meta"] = {
        "package": "lmmselect",
        "version": __version__,
        "schema_version": 1,
        "argv_config": {k: v for k, v in sorted(vars(args).items())
                        if k not in ("output",) and not callable(v)},
    }
    text = json.dumps(payload, sort_keys=True, indent=2, default=_json_default)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    for line in lines:
        print(line, file=sys.stderr)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _fmt(x: float) -> str:
    return f"{x:.4g}"


def _cmd_fit_fixed(args, parser) -> int:
    ds = load_csv(args.data, _schema_from_args(args))
    cfg = _proxy_from_args(args, parser)
    opts = _solver_options(args)
    spec = _penalty_from_args(args)
    if args.lam is not None:
        problem = FixedProblem(ds, build_proxy(ds, cfg))
        fit = problem.solve(spec, opts)
        lam, table = args.lam, None
    else:
        fit, lam, problem, table = _tuned_fixed(
            ds, range(ds.n_random), cfg, spec, opts,
            PipelineTuning(criterion=args.criterion, grid_size=args.grid_size,
                           grid_min_ratio=args.grid_min_ratio),
        )
    cert = problem.kkt_certificate(spec.with_lam(lam), fit)
    payload = {
        "kind": "fixed_fit",
        "lambda": lam,
        "penalty": {"family": spec.family, "a": spec.a},
        "coefficients": {name: float(b) for name, b in zip(ds.fixed_names, fit.beta)},
        "active": [ds.fixed_names[j] for j in fit.active],
        "objective_trace": fit.objective_trace,
        "converged": fit.converged,
        "kkt": {
            "stationarity_residual": cert.stationarity_residual,
            "dual_infeasibility": cert.dual_infeasibility,
            "curvature_margin": cert.curvature_margin,
            "passed": cert.passed,
        },
        "tuning_table": table,
    }
    lines = [f"selected fixed effects: {', '.join(payload['active']) or '(none)'}",
             f"lambda = {_fmt(lam)}  objective = {_fmt(fit.objective_trace[-1])}"]
    _emit(payload, args, lines)
    return EXIT_NOCONV if args.strict and not fit.converged else EXIT_OK


def _cmd_fit_random(args, parser) -> int:
    ds = load_csv(args.data, _schema_from_args(args))
    cfg = _proxy_from_args(args, parser)
    opts = _solver_options(args)
    spec = _penalty_from_args(args)
    if args.lam is not None:
        problem = RandomProblem(ds, build_projection(ds.stacked_X()), cfg)
        fit = problem.solve(spec, opts)
        lam, table = args.lam, None
    else:
        fit, lam, problem, _, table = _tuned_random(
            ds, range(ds.n_fixed), cfg, spec, opts,
            PipelineTuning(criterion=args.criterion, grid_size=args.grid_size,
                           grid_min_ratio=args.grid_min_ratio),
        )
    cert = problem.kkt_certificate(spec.with_lam(lam), fit)
    payload = {
        "kind": "random_fit",
        "lambda": lam,
        "penalty": {"family": spec.family, "a": spec.a},
        "selected": [ds.random_names[k] for k in fit.selected],
        "group_norms": {name: float(v) for name, v in zip(ds.random_names, fit.group_norms)},
        "sd_estimates": {name: float(v) for name, v in zip(ds.random_names, fit.sd_estimates)},
        "objective_trace": fit.objective_trace,
        "converged": fit.converged,
        "kkt": {
            "stationarity_residual": cert.stationarity_residual,
            "dual_infeasibility": cert.dual_infeasibility,
            "curvature_margin": cert.curvature_margin,
            "passed": cert.passed,
        },
        "tuning_table": table,
    }
    lines = ["per-effect standard deviation estimates:"]
    for name, v in zip(ds.random_names, fit.sd_estimates):
        mark = "*" if name in payload["selected"] else " "
        lines.append(f"  {mark} {name:<16} {_fmt(v)}")
    _emit(payload, args, lines)
    return EXIT_NOCONV if args.strict and not fit.converged else EXIT_OK


def _cmd_fit(args, parser) -> int:
    ds = load_csv(args.data, _schema_from_args(args))
    cfg = _proxy_from_args(args, parser)
    result = fit_alternating(
        ds, cfg, _penalty_from_args(args),
        tuning=PipelineTuning(criterion=args.criterion, grid_size=args.grid_size,
                              grid_min_ratio=args.grid_min_ratio),
        max_rounds=args.max_rounds,
        opts=_solver_options(args),
        first_random_lambda_ratio=args.first_random_lambda_ratio,
    )
    payload = {
        "kind": "pipeline_fit",
        "stable": result.stable,
        "n_rounds": result.n_rounds,
        "fixed": {
            "coefficients": {n: float(b) for n, b in zip(ds.fixed_names, result.fixed.beta)},
            "active": [ds.fixed_names[j] for j in result.fixed.active],
            "lambda": result.fixed.lam,
        },
        "random": {
            "selected": [ds.random_names[k] for k in result.random.selected],
            "sd_estimates": {n: float(v) for n, v in
                             zip(ds.random_names, result.random.sd_estimates)},
            "lambda": result.random.lam,
        },
        "trace": [
            {
                "round": t.round_index, "stage": t.stage,
                "fixed_set": [ds.fixed_names[j] for j in t.fixed_set],
                "random_set": [ds.random_names[k] for k in t.random_set],
                "fixed_lambda": t.fixed_lam, "random_lambda": t.random_lam,
            }
            for t in result.trace
        ],
    }
    if args.refit:
        rf = refit_selected(ds, result.fixed.active, result.random.selected)
        payload["refit"] = {
            "beta": {ds.fixed_names[j]: float(b)
                     for j, b in zip(rf.fixed_set, rf.beta)},
            "tstats": {ds.fixed_names[j]: float(t)
                       for j, t in zip(rf.fixed_set, rf.tstats)},
            "sigma2": rf.sigma2,
            "residual_sd": rf.residual_sd,
            "G": rf.G.tolist(),
            "converged": rf.converged,
        }
    lines = [
        f"fixed:  {', '.join(payload['fixed']['active']) or '(none)'}",
        f"random: {', '.join(payload['random']['selected']) or '(none)'}",
        f"rounds: {result.n_rounds}  stable: {result.stable}",
    ]
    _emit(payload, args, lines)
    converged = result.fixed.converged and result.random.converged
    return EXIT_NOCONV if args.strict and not converged else EXIT_OK


def _cmd_simulate(args, parser) -> int:
    cfg = StudyConfig(
        example=args.example, N=args.N, n_i=args.ni, rho=args.rho,
        replicates=args.replicates,
        methods=tuple(m for m in args.methods.split(",") if m.strip()),
        seed=args.seed, threads=args.threads, certify=not args.no_certify,
        grid_size=args.grid_size, grid_min_ratio=args.grid_min_ratio,
    )
    report = run_study(cfg)
    payload = report_to_dict(report)
    lines = [f"scenario {cfg.example}  N={cfg.N} n_i={cfg.n_i} "
             f"replicates={cfg.replicates} seed={cfg.seed}",
             f"{'method':<10}{'%CF':>7}{'%CR':>7}{'FNRf':>7}{'FPRf':>7}"
             f"{'FNRr':>7}{'FPRr':>7}{'MRL2f':>8}{'MRL1f':>8}{'MRL2r':>8}{'MRL1r':>8}"]
    for m, s in payload["methods"].items():
        lines.append(
            f"{m:<10}"
            f"{s['cf_pct']:>7.4g}{s['cr_pct']:>7.4g}"
            f"{s['fnr_fixed_pct']:>7.4g}{s['fpr_fixed_pct']:>7.4g}"
            f"{s['fnr_random_pct']:>7.4g}{s['fpr_random_pct']:>7.4g}"
            f"{s['mrl2_fixed']:>8.4g}{s['mrl1_fixed']:>8.4g}"
            f"{s['mrl2_random']:>8.4g}{s['mrl1_random']:>8.4g}"
        )
    _emit(payload, args, lines)
    return EXIT_OK


def _cmd_diagnose(args, parser) -> int:
    ds = load_csv(args.data, _schema_from_args(args))
    cfg = _proxy_from_args(args, parser)
    ref = np.loadtxt(args.reference_g_file, delimiter=",", ndmin=2)

    def _resolve(names_arg, available):
        if names_arg is None:
            return None
        names = [c for c in names_arg.split(",") if c.strip()]
        missing = [c for c in names if c not in available]
        if missing:
            parser.error(f"unknown columns {missing}")
        return [available.index(c) for c in names]

    diag = proxy_diagnostics(
        ds, cfg, ref, args.reference_sigma2,
        active_fixed=_resolve(args.active_fixed, list(ds.fixed_names)),
        active_random=_resolve(args.active_random, list(ds.random_names)),
    )
    payload = {
        "kind": "proxy_diagnostics",
        "fixed_whitened_gap": diag.fixed_whitened_gap,
        "fixed_gram_gap": diag.fixed_gram_gap,
        "random_restricted_gap": diag.random_restricted_gap,
        "min_eig_proxy_minus_ref": diag.min_eig_proxy_minus_ref,
        "min_eig_logn_ref_minus_proxy": diag.min_eig_logn_ref_minus_proxy,
        "proxy_dominates_ref": diag.proxy_dominates_ref,
        "logn_ref_dominates_proxy": diag.logn_ref_dominates_proxy,
    }
    lines = [f"whitened-curvature gap: {_fmt(diag.fixed_whitened_gap)}",
             f"gram-curvature gap:     {_fmt(diag.fixed_gram_gap)}",
             f"restricted gap:         {_fmt(diag.random_restricted_gap)}",
             f"proxy dominates reference: {diag.proxy_dominates_ref}"]
    _emit(payload, args, lines)
    return EXIT_OK


def _cmd_oracle(args, parser) -> int:
    if args.lam is None:
        parser.error("oracle requires --lambda")
    ds = load_csv(args.data, _schema_from_args(args))
    cfg = _proxy_from_args(args, parser)
    spec = _penalty_from_args(args)
    if args.target == "fixed":
        dss, _ = standardize(ds)
        support, value, beta = subset_oracle_fixed(dss, build_proxy(dss, cfg), spec)
        payload = {"kind": "oracle_fixed", "support": [ds.fixed_names[j] for j in support],
                   "objective": value, "beta_standardized": beta.tolist()}
    else:
        support, value, gamma = group_subset_oracle(
            ds, build_projection(ds.stacked_X()), cfg, spec)
        payload = {"kind": "oracle_random",
                   "support": [ds.random_names[k] for k in support],
                   "objective": value}
    _emit(payload, args, [f"oracle support: {payload['support']}",
                          f"objective = {_fmt(value)}"])
    return EXIT_OK


_COMMANDS = {
    "fit-fixed": _cmd_fit_fixed,
    "fit-random": _cmd_fit_random,
    "fit": _cmd_fit,
    "simulate": _cmd_simulate,
    "diagnose": _cmd_diagnose,
    "oracle": _cmd_oracle,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return EXIT_USAGE
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return _COMMANDS[args.command](args, parser)
    except SystemExit as exc:  # parser.error inside a command
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
        return EXIT_USAGE
    except (LmmSelectError, OSError, ValueError) as exc:
        print(f"lmmselect: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
