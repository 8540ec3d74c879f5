"""Benchmark data generators, selection metrics, and the study runner.

Two built-in scenarios exercise the selectors end to end: scenario 1 is a
small model with separate fixed and random candidate covariates and a
random intercept; scenario 2 is a wide correlated design in which the
random candidates are the first ten fixed covariates.  The runner draws
replicate datasets from per-replicate spawned generators, applies each
requested method, and aggregates exact-selection rates, miss/false-alarm
rates, and relative estimation losses.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field, asdict

import numpy as np

from .base import SolverOptions
from .data import LongitudinalDataset, SubjectBlock
from .fixed_effects import FixedProblem
from .gls import ProxyConfig, build_projection, build_proxy
from .penalties import PenaltySpec
from .pipeline import PipelineTuning, _tuned_fixed, _tuned_random, fit_alternating
from .random_effects import RandomProblem

RNG_DESCRIPTION = "numpy PCG64, per-replicate streams via SeedSequence(seed).spawn"

# true covariance of the three active random effects in both scenarios
TRUE_G = np.array([
    [9.0, 4.8, 0.6],
    [4.8, 4.0, 1.0],
    [0.6, 1.0, 1.0],
])

METHODS = ("scad-p", "lasso-p", "scad-t", "mcp-p")


@dataclass(frozen=True)
class Example1Config:
    """Scenario 1: d = 9 uniform fixed candidates, random intercept + 3 slopes."""

    N: int = 30
    n_i: int = 5
    seed: int = 0
    d: int = 9
    q: int = 4


@dataclass(frozen=True)
class Example2Config:
    """Scenario 2: wide AR-correlated design, random candidates overlap fixed."""

    N: int = 30
    n_i: int = 8
    rho: float = 0.3
    seed: int = 0
    d: int = 100
    q: int = 10

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")


@dataclass(frozen=True)
class SimTruth:
    """Ground truth attached to a generated dataset."""

    fixed_set: tuple[int, ...]
    random_set: tuple[int, ...]
    beta0: np.ndarray
    gamma: np.ndarray          # realized, subject-major, zeros off the true set
    sigma2: float
    G: np.ndarray              # covariance of the active random effects


def sample_random_effects(n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Draws of the active random-effects vector, one row per subject."""
    L = np.linalg.cholesky(TRUE_G)
    return rng.standard_normal((n_draws, 3)) @ L.T


def generate_example1(
    cfg: Example1Config,
    rng: np.random.Generator | None = None,
    zero_noise: bool = False,
) -> tuple[LongitudinalDataset, SimTruth]:
    """Scenario 1 data: random intercept plus two active random slopes.

    ``zero_noise`` silences both the random effects and the residual
    noise, leaving the deterministic fixed-effect skeleton.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    N, ni, d, q = cfg.N, cfg.n_i, cfg.d, cfg.q
    beta0 = np.zeros(d)
    beta0[:2] = 1.0
    gam = sample_random_effects(N, rng)
    if zero_noise:
        gam = np.zeros_like(gam)
    subjects = []
    gamma_full = np.zeros(N * q)
    for i in range(N):
        X = rng.uniform(-2.0, 2.0, size=(ni, d))
        zcov = rng.uniform(-2.0, 2.0, size=(ni, 3))
        Z = np.hstack([np.ones((ni, 1)), zcov])
        eps = np.zeros(ni) if zero_noise else rng.standard_normal(ni)
        y = X @ beta0 + Z[:, :3] @ gam[i] + eps
        subjects.append(SubjectBlock(y, X, Z))
        gamma_full[i * q:i * q + 3] = gam[i]
    ds = LongitudinalDataset(
        tuple(subjects),
        tuple(f"x{j}" for j in range(1, d + 1)),
        ("z_icept", "z1", "z2", "z3"),
    )
    truth = SimTruth(
        fixed_set=(0, 1),
        random_set=(0, 1, 2),
        beta0=beta0,
        gamma=gamma_full,
        sigma2=1.0,
        G=TRUE_G.copy(),
    )
    return ds, truth


def generate_example2(
    cfg: Example2Config,
    rng: np.random.Generator | None = None,
) -> tuple[LongitudinalDataset, SimTruth]:
    """Scenario 2 data: AR(rho) covariates, first and last dichotomized,
    random candidates equal to the first ten fixed covariates."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    N, ni, d, q = cfg.N, cfg.n_i, cfg.d, cfg.q
    idx = np.arange(d)
    Sigma = cfg.rho ** np.abs(idx[:, None] - idx[None, :])
    L = np.linalg.cholesky(Sigma)
    beta0 = np.zeros(d)
    beta0[0], beta0[2], beta0[5] = 2.0, 1.5, 1.0
    gam = sample_random_effects(N, rng)
    subjects = []
    gamma_full = np.zeros(N * q)
    for i in range(N):
        raw = rng.standard_normal((ni, d)) @ L.T
        X = raw.copy()
        X[:, 0] = (raw[:, 0] > 0).astype(float)
        X[:, d - 1] = (raw[:, d - 1] > 0).astype(float)
        Z = X[:, :q].copy()
        eps = rng.standard_normal(ni)
        y = X @ beta0 + Z[:, :3] @ gam[i] + eps
        subjects.append(SubjectBlock(y, X, Z))
        gamma_full[i * q:i * q + 3] = gam[i]
    ds = LongitudinalDataset(
        tuple(subjects),
        tuple(f"x{j}" for j in range(1, d + 1)),
        tuple(f"x{j}" for j in range(1, q + 1)),
    )
    truth = SimTruth(
        fixed_set=(0, 2, 5),
        random_set=(0, 1, 2),
        beta0=beta0,
        gamma=gamma_full,
        sigma2=1.0,
        G=TRUE_G.copy(),
    )
    return ds, truth


@dataclass
class ReplicateMetrics:
    """Per-replicate selection and estimation outcomes (fractions, not %)."""

    cf: float
    cr: float
    fnr_fixed: float
    fpr_fixed: float
    fnr_random: float
    fpr_random: float
    rl2_fixed: float
    rl1_fixed: float
    rl2_random: float
    rl1_random: float


def selection_metrics(selected_fixed, selected_random, truth: SimTruth,
                      d: int, q: int) -> dict:
    """Exact-match flags and miss/false-alarm fractions for both sides."""
    sf = set(int(j) for j in selected_fixed)
    sr = set(int(k) for k in selected_random)
    tf = set(truth.fixed_set)
    tr = set(truth.random_set)

    def rates(sel, true, total):
        noise = total - len(true)
        fnr = len(true - sel) / len(true) if true else 0.0
        fpr = len(sel - true) / noise if noise else 0.0
        return fnr, fpr

    fnr_f, fpr_f = rates(sf, tf, d)
    fnr_r, fpr_r = rates(sr, tr, q)
    return {
        "cf": 1.0 if sf == tf else 0.0,
        "cr": 1.0 if sr == tr else 0.0,
        "fnr_fixed": fnr_f,
        "fpr_fixed": fpr_f,
        "fnr_random": fnr_r,
        "fpr_random": fpr_r,
    }


def relative_losses(estimate: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """(L2, L1) estimation losses relative to the target's norms."""
    estimate = np.asarray(estimate, dtype=float).ravel()
    target = np.asarray(target, dtype=float).ravel()
    n2 = np.linalg.norm(target)
    n1 = np.linalg.norm(target, 1)
    if n2 == 0.0 or n1 == 0.0:
        raise ValueError("relative loss is undefined for a zero target")
    return (
        float(np.linalg.norm(estimate - target) / n2),
        float(np.linalg.norm(estimate - target, 1) / n1),
    )


@dataclass(frozen=True)
class StudyConfig:
    """One Monte Carlo study: scenario, methods, replicate count, seed."""

    example: int = 1
    N: int = 30
    n_i: int = 5
    rho: float = 0.3
    replicates: int = 10
    methods: tuple[str, ...] = ("scad-p",)
    seed: int = 0
    threads: int = 1
    certify: bool = True
    grid_size: int = 50
    grid_min_ratio: float = 1e-3
    scad_a: float = 3.7
    mcp_a: float = 3.0
    first_random_lambda_ratio: float | None = None

    def __post_init__(self):
        if self.example not in (1, 2):
            raise ValueError("example must be 1 or 2")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        ms = tuple(m.lower() for m in self.methods)
        unknown = [m for m in ms if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; available: {METHODS}")
        object.__setattr__(self, "methods", ms)


@dataclass
class DescentStats:
    """Counts recorded objective steps and the worst observed increase."""

    steps: int = 0
    max_increase: float = 0.0

    def record(self, trace) -> None:
        for prev, cur in zip(trace, trace[1:]):
            self.steps += 1
            slack = 1e-12 * max(1.0, abs(prev))
            inc = cur - prev - slack
            if inc > self.max_increase:
                self.max_increase = inc

    def merge(self, other: "DescentStats") -> None:
        self.steps += other.steps
        self.max_increase = max(self.max_increase, other.max_increase)


def _penalty_for(method: str, cfg: StudyConfig, lam: float = 1.0) -> PenaltySpec:
    if method == "lasso-p":
        return PenaltySpec("l1", lam)
    if method == "mcp-p":
        return PenaltySpec("mcp", lam, cfg.mcp_a)
    return PenaltySpec("scad", lam, cfg.scad_a)


def _proxies_for(method: str, truth: SimTruth, q: int) -> tuple[ProxyConfig, ProxyConfig]:
    """(fixed-stage, random-stage) proxy configurations for a method.

    The true-covariance arm knows noise effects have zero variance: the
    fixed stage uses the exact (singular) covariance, while the random
    stage needs an invertible prior and pads the noise slots with a unit
    variance so the group penalty, not the prior, does the rejecting.
    """
    if method != "scad-t":
        cfg = ProxyConfig("logn")
        return cfg, cfg
    act = list(truth.random_set)
    M_fixed = np.zeros((q, q))
    M_fixed[np.ix_(act, act)] = truth.G / truth.sigma2
    M_random = np.eye(q)
    M_random[np.ix_(act, act)] = truth.G / truth.sigma2
    return ProxyConfig("custom", M_fixed), ProxyConfig("custom", M_random)


def _kkt_record(cert_f, cert_r) -> dict:
    return {
        "fixed_passed": cert_f.passed,
        "fixed_stationarity": cert_f.stationarity_residual,
        "fixed_dual": cert_f.dual_infeasibility,
        "fixed_curvature": cert_f.curvature_margin,
        "random_passed": cert_r.passed,
        "random_stationarity": cert_r.stationarity_residual,
        "random_dual": cert_r.dual_infeasibility,
        "random_curvature": cert_r.curvature_margin,
    }


def _single_shot(ds, truth, method, cfg, opts, stats):
    """Fixed and random selection each run once on the full designs."""
    spec = _penalty_for(method, cfg)
    fixed_cfg, random_cfg = _proxies_for(method, truth, ds.n_random)
    tuning = PipelineTuning(grid_size=cfg.grid_size,
                            grid_min_ratio=cfg.grid_min_ratio)
    on_fit = lambda fit: stats.record(fit.objective_trace)

    ffit, flam, fproblem, _ = _tuned_fixed(
        ds, range(ds.n_random), fixed_cfg, spec, opts, tuning, on_fit=on_fit)
    rfit, rlam, rproblem, _, _ = _tuned_random(
        ds, range(ds.n_fixed), random_cfg, spec, opts, tuning, on_fit=on_fit)

    kkt = None
    if cfg.certify:
        cert_f = fproblem.kkt_certificate(spec.with_lam(flam), ffit)
        cert_r = rproblem.kkt_certificate(spec.with_lam(rlam), rfit)
        kkt = _kkt_record(cert_f, cert_r)
    return ffit, rfit, {"fixed": flam, "random": rlam}, kkt


def _pipeline_shot(ds, truth, method, cfg, opts, stats):
    """Iterative protocol: random pass, fixed pass, random refresh."""
    spec = _penalty_for(method, cfg)
    fixed_cfg, random_cfg = _proxies_for(method, truth, ds.n_random)
    result = fit_alternating(
        ds, fixed_cfg, spec,
        tuning=PipelineTuning(grid_size=cfg.grid_size,
                              grid_min_ratio=cfg.grid_min_ratio),
        max_rounds=1,
        opts=opts,
        first_random_lambda_ratio=cfg.first_random_lambda_ratio,
        random_proxy_cfg=random_cfg,
        adaptive_fixed_proxy=(method != "scad-t"),
        on_fit=lambda fit: stats.record(fit.objective_trace),
    )

    kkt = None
    if cfg.certify:
        # rebuild the conditioning contexts of the two reported fits
        random_used = list(result.fixed_stage_random_set)
        proxy = build_proxy(ds.with_columns(random_idx=random_used),
                            result.fixed_stage_proxy.restrict(random_used))
        fprob = FixedProblem(ds, proxy)
        cert_f = fprob.kkt_certificate(spec.with_lam(result.fixed.lam), result.fixed)
        proj = build_projection(ds.stacked_X()[:, list(result.fixed.active)])
        rprob = RandomProblem(ds, proj, random_cfg)
        cert_r = rprob.kkt_certificate(spec.with_lam(result.random.lam), result.random)
        kkt = _kkt_record(cert_f, cert_r)
    lams = {"fixed": result.fixed.lam, "random": result.random.lam}
    return result.fixed, result.random, lams, kkt


def run_replicate(cfg: StudyConfig, rep: int) -> dict:
    """Generate one dataset and apply every requested method to it."""
    child = np.random.SeedSequence(cfg.seed).spawn(cfg.replicates)[rep]
    rng = np.random.default_rng(child)
    if cfg.example == 1:
        ds, truth = generate_example1(Example1Config(cfg.N, cfg.n_i, cfg.seed), rng)
    else:
        ds, truth = generate_example2(Example2Config(cfg.N, cfg.n_i, cfg.rho, cfg.seed), rng)
    opts = SolverOptions()
    out = {"replicate": rep, "methods": {}}
    for method in cfg.methods:
        stats = DescentStats()
        try:
            if cfg.example == 2 and method in ("scad-p", "lasso-p", "mcp-p"):
                ffit, rfit, lams, kkt = _pipeline_shot(ds, truth, method, cfg, opts, stats)
            else:
                ffit, rfit, lams, kkt = _single_shot(ds, truth, method, cfg, opts, stats)
        except Exception as exc:
            out["methods"][method] = {"error": f"{type(exc).__name__}: {exc}"}
            continue
        record = selection_metrics(ffit.active, rfit.selected, truth,
                                   ds.n_fixed, ds.n_random)
        rl2_f, rl1_f = relative_losses(ffit.beta, truth.beta0)
        rl2_r, rl1_r = relative_losses(rfit.gamma, truth.gamma)
        record.update({
            "rl2_fixed": rl2_f, "rl1_fixed": rl1_f,
            "rl2_random": rl2_r, "rl1_random": rl1_r,
            "lam": lams,
            "converged": bool(ffit.converged and rfit.converged),
            "solver_steps": stats.steps,
            "max_objective_increase": stats.max_increase,
        })
        if kkt is not None:
            record["kkt"] = kkt
        out["methods"][method] = record
    return out


_AGG_PCT = ("cf", "cr", "fnr_fixed", "fpr_fixed", "fnr_random", "fpr_random")
_AGG_MEAN = ("rl2_fixed", "rl1_fixed", "rl2_random", "rl1_random")


@dataclass
class SimStudyReport:
    """Aggregated study outcome plus the replicate-level records."""

    config: StudyConfig
    methods: dict
    replicates: list
    n_failures: int
    solver_steps: int
    max_objective_increase: float
    rng: str = RNG_DESCRIPTION
    schema_version: int = 1


def run_study(cfg: StudyConfig) -> SimStudyReport:
    """Run all replicates (optionally in parallel) and aggregate."""
    if cfg.threads > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            records = list(pool.map(run_replicate, [cfg] * cfg.replicates,
                                    range(cfg.replicates)))
    else:
        records = [run_replicate(cfg, rep) for rep in range(cfg.replicates)]

    methods_summary = {}
    n_failures = 0
    total = DescentStats()
    for method in cfg.methods:
        rows = []
        kkt_all = True
        kkt_seen = False
        for rec in records:
            m = rec["methods"].get(method)
            if m is None or "error" in m:
                n_failures += 1
                continue
            rows.append(m)
            total.merge(DescentStats(m["solver_steps"], m["max_objective_increase"]))
            if "kkt" in m:
                kkt_seen = True
                kkt_all = kkt_all and m["kkt"]["fixed_passed"] and m["kkt"]["random_passed"]
        summary = {"n_ok": len(rows)}
        for key in _AGG_PCT:
            summary[f"{key}_pct"] = (
                100.0 * float(np.mean([r[key] for r in rows])) if rows else float("nan")
            )
        for key in _AGG_MEAN:
            summary[f"m{key}"] = (
                float(np.mean([r[key] for r in rows])) if rows else float("nan")
            )
        if kkt_seen:
            summary["kkt_all_passed"] = bool(kkt_all)
        methods_summary[method] = summary

    return SimStudyReport(
        config=cfg,
        methods=methods_summary,
        replicates=records,
        n_failures=n_failures,
        solver_steps=total.steps,
        max_objective_increase=total.max_increase,
    )


def report_to_dict(report: SimStudyReport) -> dict:
    """JSON-ready dictionary with native Python scalars throughout."""

    def convert(obj):
        if isinstance(obj, dict):
            return {str(k): convert(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [convert(v) for v in obj]
        if isinstance(obj, np.ndarray):
            return [convert(v) for v in obj.tolist()]
        if isinstance(obj, (np.floating, np.integer)):
            obj = obj.item()
        if isinstance(obj, float) and not np.isfinite(obj):
            return None
        return obj

    d = {
        "schema_version": report.schema_version,
        "rng": report.rng,
        "config": convert(asdict(report.config)),
        "methods": convert(report.methods),
        "replicates": convert(report.replicates),
        "n_failures": report.n_failures,
        "solver_steps": report.solver_steps,
        "max_objective_increase": report.max_objective_increase,
    }
    return d
