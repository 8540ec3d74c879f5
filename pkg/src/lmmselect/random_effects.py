"""Group-penalized restricted posterior mode for random-effect selection.

Projecting the response onto the orthogonal complement of the fixed
design removes the fixed effects entirely, so the realized random-effects
vector can be estimated without knowing them.  A noise random effect has
all of its per-subject realizations equal to zero, which makes selection
a group problem: coefficients of effect k across subjects form one group
whose Euclidean norm is penalized,

    0.5 * (y - Z g)' P (y - Z g) + 0.5 * g' Minv_all g
        + n * sum_k p(||g_{.k}||_2).

Minimization alternates block proximal-gradient sweeps over groups with
outer reweighting of the concave penalty (group LLA).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import penalties
from .base import DimensionError, FactorizationError, SolverOptions
from .data import LongitudinalDataset
from .gls import FixedProjection, ProxyConfig
from .penalties import PenaltySpec


@dataclass(frozen=True)
class GroupKktCertificate:
    """Group-wise stationarity, dual-feasibility, and curvature checks.

    Pass rules mirror the coefficient-wise certificate: scaled
    stationarity residual, inactive group dual norms below one, and a
    nonnegative curvature margin on the active block.
    """

    stationarity_residual: float
    dual_infeasibility: float
    curvature_margin: float
    tol: float = 1e-6
    n_scale: float = 1.0

    @property
    def stationarity_ok(self) -> bool:
        return self.stationarity_residual <= self.tol * max(self.n_scale, 1.0)

    @property
    def dual_ok(self) -> bool:
        return self.dual_infeasibility < 1.0

    @property
    def curvature_ok(self) -> bool:
        return self.curvature_margin >= 0.0

    @property
    def passed(self) -> bool:
        return self.stationarity_ok and self.dual_ok and self.curvature_ok


@dataclass
class RandomFitResult:
    """Solution of the group-penalized random-effects problem."""

    gamma: np.ndarray                # subject-major, length N*q
    group_norms: np.ndarray          # per random effect
    selected: tuple[int, ...]
    sd_estimates: np.ndarray         # group norm / sqrt(N)
    objective_trace: list[float]
    lam: float
    converged: bool
    n_lla_iter: int
    n_sweeps: int
    quad_loss: float                 # smooth part (projected quadratic + prior ridge)
    edof: float = 0.0                # effective dimension of the regularized solve
    kkt: GroupKktCertificate | None = None

    @property
    def df(self) -> int:
        return len(self.selected)

    def gamma_by_subject(self, n_subjects: int) -> np.ndarray:
        return self.gamma.reshape(n_subjects, -1)


class RandomProblem:
    """Dense curvature form of the group problem, reusable across lam.

    Assembles A = Z'PZ + Minv_all, b = Z'Py, the per-group column blocks
    of A, and each group's largest curvature eigenvalue (the proximal step
    size) once; every solve on the regularization path then runs on the
    cached pieces.
    """

    def __init__(self, ds: LongitudinalDataset, projection: FixedProjection,
                 cfg: ProxyConfig):
        self.ds = ds
        self.N, self.q, self.n = ds.n_subjects, ds.n_random, ds.n_total
        if projection.n_rows != self.n:
            raise DimensionError("projection and dataset sizes disagree")
        if self.q == 0:
            raise DimensionError("no random-effect candidates")
        zb = ds.z_blocks()
        y = ds.stacked_y()
        Nq = self.N * self.q

        M = cfg.materialize(self.q, self.n)
        try:
            Minv = np.linalg.inv(M)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError("proxy matrix is singular") from exc

        # H = Z'PZ = Z'Z - (Q'Z)'(Q'Z); A = H + blockdiag(Minv)
        H = np.zeros((Nq, Nq))
        Q = projection.basis
        r = projection.rank
        QtZ = np.zeros((r, Nq))
        pos = 0
        for i, blk in enumerate(ds.subjects):
            sl = slice(i * self.q, (i + 1) * self.q)
            H[sl, sl] = blk.Z.T @ blk.Z
            if r:
                QtZ[:, sl] = Q[pos:pos + blk.n_obs].T @ blk.Z
            pos += blk.n_obs
        if r:
            H -= QtZ.T @ QtZ
        A = H.copy()
        for i in range(self.N):
            sl = slice(i * self.q, (i + 1) * self.q)
            A[sl, sl] += Minv
        self.H = H
        self.A = A
        self.Minv = Minv

        py = projection.apply(y)
        self.b = zb.rmatvec(py)
        self.c0 = 0.5 * float(py @ py)

        self.group_idx = [np.arange(self.N) * self.q + k for k in range(self.q)]
        self.A_cols = [A[:, idx].copy() for idx in self.group_idx]
        self.step = np.array([
            float(np.max(np.linalg.eigvalsh(A[np.ix_(idx, idx)])))
            for idx in self.group_idx
        ])

    def lambda_max(self) -> float:
        """Smallest lam at which the zero vector is group-stationary."""
        return max(
            float(np.linalg.norm(self.b[idx])) for idx in self.group_idx
        ) / self.n

    def group_norms(self, gamma: np.ndarray) -> np.ndarray:
        return np.array([float(np.linalg.norm(gamma[idx])) for idx in self.group_idx])

    def quad(self, gamma: np.ndarray) -> float:
        return float(0.5 * gamma @ (self.A @ gamma) - self.b @ gamma + self.c0)

    def objective(self, spec: PenaltySpec, gamma: np.ndarray) -> float:
        norms = self.group_norms(gamma)
        return self.quad(gamma) + self.n * float(np.sum(penalties.value(spec, norms)))

    def solve(
        self,
        spec: PenaltySpec,
        opts: SolverOptions | None = None,
        gamma0: np.ndarray | None = None,
    ) -> RandomFitResult:
        opts = opts or SolverOptions()
        opts.validate()
        Nq = self.N * self.q
        gamma = np.zeros(Nq) if gamma0 is None else np.asarray(gamma0, dtype=float).copy()
        if len(gamma) != Nq:
            raise DimensionError(f"warm start has length {len(gamma)}, expected {Nq}")

        if spec.lam == 0.0:
            # unpenalized ridge limit: the strictly convex system is solved directly
            trace = [self.objective(spec, gamma)]
            gamma = np.linalg.solve(self.A, self.b)
            trace.append(self.objective(spec, gamma))
            return self._package(spec, gamma, trace, converged=True,
                                 n_lla=1, n_sweeps=0)

        trace = [self.objective(spec, gamma)]
        total_sweeps = 0
        converged = False
        n_lla = 0
        for n_lla in range(1, opts.lla_max_iter + 1):
            norms = self.group_norms(gamma)
            weights = np.asarray(penalties.derivative(spec, norms), dtype=float)
            new_gamma, sweeps = self._prox_sweeps(
                gamma, self.n * weights, opts.group_tol, opts.group_max_sweeps
            )
            total_sweeps += sweeps
            trace.append(self.objective(spec, new_gamma))
            new_norms = self.group_norms(new_gamma)
            same_support = np.array_equal(new_norms > 0, norms > 0)
            delta = float(np.max(np.abs(new_gamma - gamma)))
            gamma = new_gamma
            if same_support and delta <= opts.lla_tol:
                converged = True
                break
        if opts.polish:
            # exact-penalty block descent; fixed points satisfy the group
            # stationarity conditions of the true objective directly
            gamma, sweeps, polished = self._prox_sweeps_exact(
                gamma, spec, opts.group_tol * 1e-2, opts.group_max_sweeps
            )
            total_sweeps += sweeps
            converged = converged or polished
            trace.append(self.objective(spec, gamma))
        return self._package(spec, gamma, trace, converged, n_lla, total_sweeps)

    def _prox_sweeps(self, gamma, thresholds, tol, max_sweeps):
        """Cyclic block proximal descent at frozen group thresholds."""
        gamma = gamma.copy()
        grad = self.A @ gamma - self.b
        sweeps = 0
        for sweeps in range(1, max_sweeps + 1):
            max_change = 0.0
            for k in range(self.q):
                idx = self.group_idx[k]
                L = self.step[k]
                gk = gamma[idx]
                v = gk - grad[idx] / L
                nv = float(np.linalg.norm(v))
                thr = thresholds[k] / L
                if nv <= thr:
                    new = np.zeros_like(v)
                else:
                    new = (1.0 - thr / nv) * v
                delta = new - gk
                change = float(np.linalg.norm(delta))
                if change > 0.0:
                    grad += self.A_cols[k] @ delta
                    gamma[idx] = new
                    if change > max_change:
                        max_change = change
            if max_change <= tol:
                break
        return gamma, sweeps

    def effective_df(self, selected) -> float:
        """Trace of the regularized smoother on the selected groups."""
        if not selected:
            return 0.0
        idx = np.concatenate([self.group_idx[k] for k in selected])
        idx.sort()
        sub_A = self.A[np.ix_(idx, idx)]
        sub_H = self.H[np.ix_(idx, idx)]
        return float(np.trace(np.linalg.solve(sub_A, sub_H)))

    def _prox_sweeps_exact(self, gamma, spec, tol, max_sweeps):
        """Block majorize-minimize with the exact concave group penalty.

        Each block update majorizes the smooth part at curvature step[k]
        and minimizes step/2 * ||g_k - v||^2 + n * p(||g_k||) exactly, so
        the true objective never increases.
        """
        from .fixed_effects import _exact_scalar_prox

        gamma = gamma.copy()
        grad = self.A @ gamma - self.b
        sweeps = 0
        hit_tol = False
        for sweeps in range(1, max_sweeps + 1):
            max_change = 0.0
            for k in range(self.q):
                idx = self.group_idx[k]
                L = self.step[k]
                gk = gamma[idx]
                v = gk - grad[idx] / L
                nv = float(np.linalg.norm(v))
                t = _exact_scalar_prox(L, L * nv, self.n, spec) if nv > 0 else 0.0
                new = (t / nv) * v if t > 0.0 else np.zeros_like(v)
                delta = new - gk
                change = float(np.linalg.norm(delta))
                if change > 0.0:
                    grad += self.A_cols[k] @ delta
                    gamma[idx] = new
                    if change > max_change:
                        max_change = change
            if max_change <= tol:
                hit_tol = True
                break
        return gamma, sweeps, hit_tol

    def _package(self, spec, gamma, trace, converged, n_lla, n_sweeps):
        norms = self.group_norms(gamma)
        selected = tuple(int(k) for k in np.flatnonzero(norms > 0))
        return RandomFitResult(
            gamma=gamma,
            group_norms=norms,
            selected=selected,
            sd_estimates=norms / np.sqrt(self.N),
            objective_trace=trace,
            lam=spec.lam,
            converged=converged,
            n_lla_iter=n_lla,
            n_sweeps=n_sweeps,
            quad_loss=self.quad(gamma),
            edof=self.effective_df(selected),
        )

    def kkt_certificate(
        self, spec: PenaltySpec, result: RandomFitResult, tol: float = 1e-6
    ) -> GroupKktCertificate:
        gamma = result.gamma
        w = self.b - self.A @ gamma  # Z'P(y - Zg) - Minv_all g
        norms = result.group_norms
        active = list(result.selected)
        inactive = [k for k in range(self.q) if k not in result.selected]

        stat = 0.0
        for k in active:
            idx = self.group_idx[k]
            slope = penalties.derivative(spec, norms[k])
            target = self.n * slope * gamma[idx] / norms[k]
            stat = max(stat, float(np.max(np.abs(w[idx] - target))))

        zero_slope = self.n * penalties.derivative(spec, 0.0)
        dual = 0.0
        for k in inactive:
            gnorm = float(np.linalg.norm(w[self.group_idx[k]]))
            if zero_slope > 0:
                dual = max(dual, gnorm / zero_slope)
            elif gnorm > 0:
                dual = np.inf

        if active:
            idx_a = np.concatenate([self.group_idx[k] for k in active])
            sub = self.A[np.ix_(idx_a, idx_a)]
            min_eig = float(np.min(np.linalg.eigvalsh(sub)))
            curv2 = [penalties.second_derivative(spec, norms[k]) for k in active]
            margin = min_eig + self.n * float(np.min(curv2))
        else:
            margin = 0.0

        cert = GroupKktCertificate(
            stationarity_residual=stat,
            dual_infeasibility=dual,
            curvature_margin=margin,
            tol=tol,
            n_scale=self.n * spec.lam,
        )
        result.kkt = cert
        return cert


def objective_random(
    ds: LongitudinalDataset,
    projection: FixedProjection,
    cfg: ProxyConfig,
    spec: PenaltySpec,
    gamma: np.ndarray,
) -> float:
    """Exact group-penalized objective at ``gamma`` (subject-major layout)."""
    N, q = ds.n_subjects, ds.n_random
    gamma = np.asarray(gamma, dtype=float).ravel()
    if len(gamma) != N * q:
        raise DimensionError(f"gamma has length {len(gamma)}, expected {N * q}")
    zb = ds.z_blocks()
    resid = ds.stacked_y() - zb.matvec(gamma)
    quad = 0.5 * projection.quad_form(resid)
    M = cfg.materialize(q, ds.n_total)
    Minv = np.linalg.inv(M)
    per_subject = gamma.reshape(N, q)
    ridge = 0.5 * float(np.sum(per_subject * (per_subject @ Minv.T)))
    norms = np.linalg.norm(per_subject, axis=0)
    return quad + ridge + ds.n_total * float(np.sum(penalties.value(spec, norms)))


def fit_random(
    ds: LongitudinalDataset,
    projection: FixedProjection,
    cfg: ProxyConfig,
    spec: PenaltySpec,
    opts: SolverOptions | None = None,
    gamma0: np.ndarray | None = None,
) -> RandomFitResult:
    """Minimize the group-penalized restricted posterior objective.

    Groups with zero norm are exactly zero in the returned vector; the
    per-effect standard-deviation estimates are the group norms divided
    by sqrt(N).
    """
    return RandomProblem(ds, projection, cfg).solve(spec, opts, gamma0)


def oracle_bayes(
    ds: LongitudinalDataset,
    projection: FixedProjection,
    cfg: ProxyConfig,
    true_set,
) -> np.ndarray:
    """Restricted posterior-mode estimate given a known random-effect set.

    Solves the prior-regularized normal equations on the given groups
    (prior restricted first, then inverted) and returns a full-length
    subject-major vector that is zero off the set.
    """
    sel = sorted(set(int(k) for k in true_set))
    if not sel:
        raise DimensionError("true random-effect set must be nonempty")
    N, q = ds.n_subjects, ds.n_random
    restricted = ds.with_columns(random_idx=sel)
    prob = RandomProblem(restricted, projection, cfg.restrict(sel))
    try:
        gamma_s = np.linalg.solve(prob.A, prob.b)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("restricted curvature matrix is singular") from exc

    s = len(sel)
    gamma = np.zeros(N * q)
    for i in range(N):
        for a, k in enumerate(sel):
            gamma[i * q + k] = gamma_s[i * s + a]
    return gamma


def kkt_check_random(
    ds: LongitudinalDataset,
    projection: FixedProjection,
    cfg: ProxyConfig,
    spec: PenaltySpec,
    result: RandomFitResult,
    tol: float = 1e-6,
) -> GroupKktCertificate:
    """Certify a group fit against the local-minimizer conditions."""
    return RandomProblem(ds, projection, cfg).kkt_certificate(spec, result, tol)


def marginal_likelihood_score(
    ds: LongitudinalDataset,
    fixed_idx,
    cfg: ProxyConfig,
    selected,
) -> float:
    """Gaussian marginal score of a candidate random-effect set.

    Builds the proxy covariance on the set, profiles the fixed
    coefficients out of the whitened regression, and returns
    ``n log(rss/n) + logdet`` of the modeled covariance.  Unlike the
    projected quadratic, this cannot be driven to zero by saturating the
    residual space, so it stays informative when the number of group
    coefficients exceeds the projected dimension.
    """
    import math

    from .gls import build_proxy

    sel = sorted(int(k) for k in selected)
    n = ds.n_total
    sub = ds.with_columns(random_idx=sel)
    proxy = build_proxy(sub, cfg.restrict(sel))
    y_w = proxy.whiten(ds.stacked_y())
    fixed_idx = list(fixed_idx)
    if fixed_idx:
        X_w = proxy.whiten(ds.stacked_X()[:, fixed_idx])
        coef, *_ = np.linalg.lstsq(X_w, y_w, rcond=None)
        rss = float(np.sum((y_w - X_w @ coef) ** 2))
    else:
        rss = float(y_w @ y_w)
    logdet = 2.0 * sum(float(np.sum(np.log(np.diag(L)))) for L in proxy.factors)
    return n * math.log(max(rss / n, 1e-300)) + logdet
