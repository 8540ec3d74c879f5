"""Alternating fixed/random selection and post-selection refitting.

When both candidate blocks are large the two selectors feed each other:
the random-effects fit conditions on the current fixed design through the
projection, the fixed-effects fit conditions on the selected random
effects through the proxy precision, and the loop repeats until both
selected sets are stable.  A trailing random-effects pass keeps the
returned realization estimates consistent with the final fixed set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .base import DimensionError, FactorizationError, SolverOptions
from .data import LongitudinalDataset
from .fixed_effects import FixedFitResult, FixedProblem
from .gls import ProxyConfig, build_projection, build_proxy
from .penalties import PenaltySpec
from .random_effects import RandomFitResult, RandomProblem, marginal_likelihood_score
from .tuning import (TuningSpec, criterion_value, make_grid, select_lambda,
                     select_lambda_by_set_score)


@dataclass
class RoundRecord:
    """Selected sets and tuning choices for one alternation round."""

    round_index: int
    stage: str                      # "screen", "round", or "refresh"
    fixed_set: tuple[int, ...]
    random_set: tuple[int, ...]
    fixed_lam: float | None = None
    random_lam: float | None = None
    fixed_objective: float | None = None
    random_objective: float | None = None


@dataclass
class PipelineResult:
    """Final fits of the alternation with the per-round trace."""

    fixed: FixedFitResult
    random: RandomFitResult
    trace: list[RoundRecord] = field(default_factory=list)
    stable: bool = False
    n_rounds: int = 0
    # conditioning context of the reported fixed fit, for certification
    fixed_stage_proxy: ProxyConfig | None = None
    fixed_stage_random_set: tuple[int, ...] = ()

    @property
    def fixed_set(self) -> tuple[int, ...]:
        return self.fixed.active

    @property
    def random_set(self) -> tuple[int, ...]:
        return self.random.selected


def _tuned_random(ds, fixed_idx, proxy_cfg, spec, opts, tuning, fixed_lam=None,
                  on_fit=None):
    """Random-effects selection conditioned on the given fixed columns.

    When the group coefficients outnumber the projected dimension the
    projected quadratic can be driven to zero, so the information
    criterion on it is uninformative; the path is then rescored by the
    whitened marginal likelihood of each visited support instead.
    """
    fixed_idx = list(fixed_idx)
    X = ds.stacked_X()[:, fixed_idx]
    projection = build_projection(X)
    problem = RandomProblem(ds, projection, proxy_cfg)

    def fit_at(lam, warm):
        fit = problem.solve(spec.with_lam(lam), opts,
                            None if warm is None else warm.gamma)
        if on_fit is not None:
            on_fit(fit)
        return fit

    if fixed_lam is not None:
        fit = fit_at(fixed_lam, None)
        return fit, fixed_lam, problem, projection, None

    saturated = ds.n_subjects * ds.n_random >= ds.n_total - projection.rank
    if saturated:
        res = select_lambda_by_set_score(
            fit_at,
            make_grid(problem.lambda_max(), tuning.grid_size, tuning.grid_min_ratio),
            lambda sel: marginal_likelihood_score(ds, fixed_idx, proxy_cfg, sel),
        )
    else:
        res = select_lambda(
            fit_at,
            TuningSpec("auto" if tuning.criterion == "auto" else tuning.criterion,
                       "random", grid_size=tuning.grid_size,
                       grid_min_ratio=tuning.grid_min_ratio),
            spec.family,
            ds.n_total,
            lam_max=problem.lambda_max(),
            n_candidates=ds.n_random,
        )
    return res.best, res.lam, problem, projection, res.table


def _tuned_fixed(ds, random_idx, proxy_cfg, spec, opts, tuning, on_fit=None):
    """Fixed-effects selection conditioned on the given random columns.

    The path proposes supports; each support is scored once by the
    information criterion at its refitted (unpenalized) loss, so entry
    decisions near the threshold are not blurred by shrinkage.
    """
    restricted = ds.with_columns(random_idx=list(random_idx))
    proxy = build_proxy(restricted, proxy_cfg.restrict(list(random_idx)))
    problem = FixedProblem(ds, proxy)

    def fit_at(lam, warm):
        fit = problem.solve(spec.with_lam(lam), opts,
                            None if warm is None else warm.beta_standardized)
        if on_fit is not None:
            on_fit(fit)
        return fit

    lam_max = problem.lambda_max()
    if lam_max <= 0:
        fit = fit_at(0.0, None)
        return fit, 0.0, problem, None
    crit = TuningSpec("auto" if tuning.criterion == "auto" else tuning.criterion,
                      "fixed").resolve_criterion(spec.family)
    res = select_lambda_by_set_score(
        fit_at,
        make_grid(lam_max, tuning.grid_size, tuning.grid_min_ratio),
        lambda sup: criterion_value(problem.refit_quad(sup), len(sup),
                                    ds.n_total, crit, ds.n_fixed),
        support_of=lambda fit: fit.active,
    )
    return res.best, res.lam, problem, res.table


@dataclass(frozen=True)
class PipelineTuning:
    """Grid shape and criterion override shared by both stages."""

    criterion: str = "auto"
    grid_size: int = 50
    grid_min_ratio: float = 1e-3


def fit_alternating(
    ds: LongitudinalDataset,
    proxy_cfg: ProxyConfig,
    spec: PenaltySpec,
    tuning: PipelineTuning | None = None,
    max_rounds: int = 3,
    opts: SolverOptions | None = None,
    first_random_lambda_ratio: float | None = None,
    screen_lambda_ratio: float | None = None,
    random_proxy_cfg: ProxyConfig | None = None,
    adaptive_fixed_proxy: bool = False,
    on_fit=None,
) -> PipelineResult:
    """Alternate random- and fixed-effects selection until the sets settle.

    If the fixed design is at least as wide as the sample, a penalized
    least-squares screen with the L1 penalty (random effects ignored)
    first cuts it below the sample size; ``screen_lambda_ratio`` forces
    that screen's level to the given fraction of its kill threshold
    instead of BIC.  ``first_random_lambda_ratio`` does the same for the
    first random-effects pass, which is useful when the random candidate
    block is wider than the sample.  ``random_proxy_cfg`` lets the two
    stages use different proxies (default: same as ``proxy_cfg``).

    With ``adaptive_fixed_proxy`` each round's fixed stage whitens with
    the per-effect variances just estimated by the random pass instead of
    the configured proxy; this matters when random candidates overlap
    fixed covariates, where a too-large whitening weight on a small true
    variance can erase the overlapping fixed signal.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    tuning = tuning or PipelineTuning()
    opts = opts or SolverOptions()
    rnd_cfg = random_proxy_cfg or proxy_cfg
    n, d = ds.n_total, ds.n_fixed
    trace: list[RoundRecord] = []

    current_fixed = tuple(range(d))
    if d >= n:
        no_random = ds.with_columns(random_idx=[])
        proxy_id = build_proxy(no_random, proxy_cfg.restrict([]))
        problem = FixedProblem(ds, proxy_id)
        screen_spec = PenaltySpec("l1", 1.0)

        def screen_at(lam, warm):
            fit = problem.solve(screen_spec.with_lam(lam), opts,
                                None if warm is None else warm.beta_standardized)
            if on_fit is not None:
                on_fit(fit)
            return fit

        if screen_lambda_ratio is not None:
            screen_lam = screen_lambda_ratio * problem.lambda_max()
            screen_fit = screen_at(screen_lam, None)
        else:
            res = select_lambda(
                screen_at,
                TuningSpec("bic", "fixed", grid_size=tuning.grid_size,
                           grid_min_ratio=tuning.grid_min_ratio),
                "l1", n, lam_max=problem.lambda_max(), n_candidates=d,
            )
            screen_fit, screen_lam = res.best, res.lam
        current_fixed = screen_fit.active
        if len(current_fixed) >= n:
            raise DimensionError("screen failed to bring fixed effects below sample size")
        trace.append(RoundRecord(0, "screen", current_fixed, tuple(),
                                 fixed_lam=screen_lam,
                                 fixed_objective=screen_fit.objective_trace[-1]))

    fixed_fit = None
    random_fit = None
    random_cond_fixed = None  # fixed set the last random fit conditioned on
    stable = False
    rounds_done = 0
    prev_sets = None
    for r in range(1, max_rounds + 1):
        ratio = first_random_lambda_ratio if r == 1 else None
        lam0 = None
        if ratio is not None:
            X = ds.stacked_X()[:, list(current_fixed)]
            lam0 = ratio * RandomProblem(ds, build_projection(X), rnd_cfg).lambda_max()
        random_fit, rand_lam, _, _, _ = _tuned_random(
            ds, current_fixed, rnd_cfg, spec, opts, tuning, fixed_lam=lam0,
            on_fit=on_fit,
        )
        random_cond_fixed = current_fixed
        if adaptive_fixed_proxy:
            gam = random_fit.gamma_by_subject(ds.n_subjects)
            stage_cfg = ProxyConfig("custom", gam.T @ gam / ds.n_subjects)
        else:
            stage_cfg = proxy_cfg
        fixed_fit, fix_lam, _, _ = _tuned_fixed(
            ds, random_fit.selected, stage_cfg, spec, opts, tuning, on_fit=on_fit
        )
        fixed_stage_proxy, fixed_stage_random = stage_cfg, random_fit.selected
        rounds_done = r
        trace.append(RoundRecord(r, "round", fixed_fit.active, random_fit.selected,
                                 fixed_lam=fix_lam, random_lam=rand_lam,
                                 fixed_objective=fixed_fit.objective_trace[-1],
                                 random_objective=random_fit.objective_trace[-1]))
        sets = (fixed_fit.active, random_fit.selected)
        if prev_sets is not None and sets == prev_sets:
            stable = True
            break
        prev_sets = sets
        current_fixed = fixed_fit.active

    if fixed_fit.active != random_cond_fixed:
        random_fit, rand_lam, _, _, _ = _tuned_random(
            ds, fixed_fit.active, rnd_cfg, spec, opts, tuning, on_fit=on_fit
        )
        trace.append(RoundRecord(rounds_done, "refresh", fixed_fit.active,
                                 random_fit.selected, random_lam=rand_lam,
                                 random_objective=random_fit.objective_trace[-1]))

    return PipelineResult(fixed=fixed_fit, random=random_fit, trace=trace,
                          stable=stable, n_rounds=rounds_done,
                          fixed_stage_proxy=fixed_stage_proxy,
                          fixed_stage_random_set=fixed_stage_random)


@dataclass
class RefitResult:
    """Unpenalized mixed-model refit on selected effects."""

    beta: np.ndarray
    se: np.ndarray
    tstats: np.ndarray
    G: np.ndarray
    sigma2: float
    residual_sd: float
    loglik: float
    converged: bool
    n_iter: int
    fixed_set: tuple[int, ...]
    random_set: tuple[int, ...]


def refit_selected(
    ds: LongitudinalDataset,
    fixed_set,
    random_set,
    max_iter: int = 500,
    tol: float = 1e-8,
) -> RefitResult:
    """Gaussian maximum likelihood on the selected effects only.

    With an empty random set this is ordinary least squares with the
    classic degrees-of-freedom variance estimate; otherwise an EM loop
    fits an unstructured covariance for the selected random effects and a
    scalar noise variance, stopping when the log-likelihood moves less
    than ``tol``.
    """
    fixed_set = sorted(set(int(j) for j in fixed_set))
    random_set = sorted(set(int(k) for k in random_set))
    n = ds.n_total
    if len(fixed_set) >= n:
        raise DimensionError("refit needs fewer selected fixed effects than observations")
    y = ds.stacked_y()
    X = ds.stacked_X()[:, fixed_set]
    p = X.shape[1]

    if p and np.linalg.matrix_rank(X) < p:
        raise FactorizationError("restricted fixed design is rank deficient")

    if not random_set:
        if p:
            beta, *_ = np.linalg.lstsq(X, y, rcond=None)
            resid = y - X @ beta
        else:
            beta = np.zeros(0)
            resid = y.copy()
        dof = max(n - p, 1)
        sigma2 = float(resid @ resid) / dof
        if p:
            cov = sigma2 * np.linalg.inv(X.T @ X)
            se = np.sqrt(np.diag(cov))
            tstats = beta / se
        else:
            se = np.zeros(0)
            tstats = np.zeros(0)
        loglik = -0.5 * (n * math.log(2 * math.pi * sigma2) + (resid @ resid) / sigma2)
        return RefitResult(beta, se, tstats, np.zeros((0, 0)), sigma2,
                           math.sqrt(sigma2), float(loglik), True, 0,
                           tuple(fixed_set), tuple(random_set))

    Zs = [blk.Z[:, random_set] for blk in ds.subjects]
    ys = [blk.y for blk in ds.subjects]
    Xs = [blk.X[:, fixed_set] for blk in ds.subjects]
    s = len(random_set)

    if p:
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ beta
    else:
        beta = np.zeros(0)
        resid = y.copy()
    sigma2 = max(float(resid @ resid) / n, 1e-8)
    G = np.eye(s) * sigma2

    loglik = -np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Vinvs, logdets = [], []
        for i, blk in enumerate(ds.subjects):
            V = sigma2 * np.eye(blk.n_obs) + Zs[i] @ G @ Zs[i].T
            try:
                c, low = scipy.linalg.cho_factor(V, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise FactorizationError("working covariance became indefinite") from exc
            Vinvs.append(scipy.linalg.cho_solve((c, low), np.eye(blk.n_obs)))
            logdets.append(2.0 * float(np.sum(np.log(np.diag(c)))))

        if p:
            Amat = np.zeros((p, p))
            cvec = np.zeros(p)
            for i in range(len(ds.subjects)):
                XtVi = Xs[i].T @ Vinvs[i]
                Amat += XtVi @ Xs[i]
                cvec += XtVi @ ys[i]
            try:
                beta = np.linalg.solve(Amat, cvec)
            except np.linalg.LinAlgError as exc:
                raise FactorizationError("GLS system is singular") from exc

        new_loglik = 0.0
        G_acc = np.zeros((s, s))
        rss = 0.0
        for i, blk in enumerate(ds.subjects):
            r = ys[i] - (Xs[i] @ beta if p else 0.0)
            Vir = Vinvs[i] @ r
            new_loglik += -0.5 * (logdets[i] + float(r @ Vir)
                                  + blk.n_obs * math.log(2 * math.pi))
            GZt = G @ Zs[i].T
            b_i = GZt @ Vir
            C_i = G - GZt @ Vinvs[i] @ GZt.T
            G_acc += np.outer(b_i, b_i) + C_i
            e = r - Zs[i] @ b_i
            rss += float(e @ e) + sigma2 * float(
                blk.n_obs - sigma2 * np.trace(Vinvs[i])
            )
        G = G_acc / len(ds.subjects)
        sigma2 = max(rss / n, 1e-12)

        if abs(new_loglik - loglik) <= tol * max(1.0, abs(new_loglik)):
            loglik = new_loglik
            converged = True
            break
        loglik = new_loglik

    # Wald statistics at the final working covariance
    Vinvs = []
    for i, blk in enumerate(ds.subjects):
        V = sigma2 * np.eye(blk.n_obs) + Zs[i] @ G @ Zs[i].T
        Vinvs.append(np.linalg.inv(V))
    if p:
        Amat = sum(Xs[i].T @ Vinvs[i] @ Xs[i] for i in range(len(ds.subjects)))
        cov = np.linalg.inv(Amat)
        se = np.sqrt(np.diag(cov))
        tstats = beta / se
    else:
        se = np.zeros(0)
        tstats = np.zeros(0)

    return RefitResult(beta, se, tstats, G, sigma2, math.sqrt(sigma2),
                       float(loglik), converged, it,
                       tuple(fixed_set), tuple(random_set))
