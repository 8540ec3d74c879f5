"""Brute-force reference solvers and numerical checks for the test suite.

These enumerate supports exhaustively and refine with exact
one-dimensional minimization, so they bound what the iterative solvers
should achieve on toy problems.  They share nothing with the solvers'
iteration paths.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import penalties
from .base import DimensionError
from .data import LongitudinalDataset
from .gls import FixedProjection, ProxyConfig, ProxyPrecision
from .penalties import PenaltySpec

_MAX_FIXED_D = 8
_MAX_GROUPS = 5
_REFINE_PASSES = 3


def _min_quad_plus_penalty(curv: float, lin: float, n: int, spec: PenaltySpec) -> float:
    """argmin over t of 0.5*curv*t^2 - lin*t + n*p(|t|), exactly.

    The penalty is piecewise quadratic in |t|, so each (sign, segment)
    pair is a clamped parabola minimization; t = 0 is always a candidate.
    """
    best_t, best_v = 0.0, 0.0
    for sign in (1.0, -1.0):
        g = sign * lin
        for lo, hi, c2, c1, c0 in penalties.quadratic_segments(spec):
            a2 = 0.5 * curv + n * c2
            a1 = n * c1 - g
            if a2 > 0:
                t = np.clip(-a1 / (2 * a2), lo, hi if np.isfinite(hi) else None)
            elif a1 >= 0:
                t = lo
            else:
                # concave or linear decreasing piece: the far end wins
                if not np.isfinite(hi):
                    continue  # flat unbounded piece; only reachable at zero curvature
                t = hi
            v = a2 * t * t + a1 * t + n * c0
            if v < best_v:
                best_v, best_t = v, sign * t
    return best_t


def subset_oracle_fixed(
    ds: LongitudinalDataset,
    proxy: ProxyPrecision,
    spec: PenaltySpec,
) -> tuple[tuple[int, ...], float, np.ndarray]:
    """Exhaustive support search for the penalized fixed-effects problem.

    Enumerates every support, solves the restricted smooth problem
    densely, then runs exact coordinate-wise refinement passes so concave
    penalties are honored.  Returns (support, objective, beta) on the
    standardized scale the solvers use.
    """
    from .data import standardize
    from .fixed_effects import FixedProblem

    if ds.n_fixed > _MAX_FIXED_D:
        raise DimensionError(f"subset oracle limited to d <= {_MAX_FIXED_D}")
    if ds.standardization is None:
        ds, _ = standardize(ds)
    prob = FixedProblem(ds, proxy)
    d, n = prob.d, prob.n

    best = (tuple(), prob.objective(spec, np.zeros(d)), np.zeros(d))
    for r in range(1, d + 1):
        for support in itertools.combinations(range(d), r):
            idx = np.asarray(support)
            sub_gram = prob.gram[np.ix_(idx, idx)]
            sub_xty = prob.xty[idx]
            try:
                beta_s = np.linalg.solve(sub_gram, sub_xty)
            except np.linalg.LinAlgError:
                beta_s, *_ = np.linalg.lstsq(sub_gram, sub_xty, rcond=None)
            beta = np.zeros(d)
            beta[idx] = beta_s
            for _ in range(_REFINE_PASSES):
                for j in support:
                    grad_j = prob.xty[j] - prob.gram[j] @ beta + prob.gram[j, j] * beta[j]
                    beta[j] = _min_quad_plus_penalty(prob.gram[j, j], grad_j, n, spec)
            val = prob.objective(spec, beta)
            if val < best[1] - 1e-15:
                best = (tuple(int(j) for j in np.flatnonzero(beta)), val, beta)
    return best


def group_subset_oracle(
    ds: LongitudinalDataset,
    projection: FixedProjection,
    cfg: ProxyConfig,
    spec: PenaltySpec,
) -> tuple[tuple[int, ...], float, np.ndarray]:
    """Exhaustive group-support search for the random-effects problem.

    Each candidate support is solved as a restricted ridge system and then
    refined by exact proportional shrinkage of every active group, which
    handles the concave penalty.  Returns (groups, objective, gamma).
    """
    from .random_effects import RandomProblem

    q = ds.n_random
    if q > _MAX_GROUPS:
        raise DimensionError(f"group oracle limited to q <= {_MAX_GROUPS}")
    prob = RandomProblem(ds, projection, cfg)
    Nq = prob.N * prob.q

    best = (tuple(), prob.objective(spec, np.zeros(Nq)), np.zeros(Nq))
    for r in range(1, q + 1):
        for groups in itertools.combinations(range(q), r):
            idx = np.concatenate([prob.group_idx[k] for k in groups])
            idx.sort()
            sub_A = prob.A[np.ix_(idx, idx)]
            try:
                g_s = np.linalg.solve(sub_A, prob.b[idx])
            except np.linalg.LinAlgError:
                g_s, *_ = np.linalg.lstsq(sub_A, prob.b[idx], rcond=None)
            gamma = np.zeros(Nq)
            gamma[idx] = g_s
            for _ in range(_REFINE_PASSES):
                for k in groups:
                    gk = gamma[prob.group_idx[k]]
                    nrm = float(np.linalg.norm(gk))
                    if nrm == 0.0:
                        continue
                    direction = gk / nrm
                    other = gamma.copy()
                    other[prob.group_idx[k]] = 0.0
                    ak = prob.A[np.ix_(prob.group_idx[k], prob.group_idx[k])]
                    curv = float(direction @ ak @ direction)
                    lin = float(direction @ (prob.b[prob.group_idx[k]]
                                             - prob.A[prob.group_idx[k]] @ other))
                    t = _scalar_group_min(curv, lin, prob.n, spec)
                    gamma[prob.group_idx[k]] = t * direction
            val = prob.objective(spec, gamma)
            if val < best[1] - 1e-15:
                norms = prob.group_norms(gamma)
                best = (tuple(int(k) for k in np.flatnonzero(norms > 0)), val, gamma)
    return best


def _scalar_group_min(curv: float, lin: float, n: int, spec: PenaltySpec) -> float:
    """argmin over t >= 0 of 0.5*curv*t^2 - lin*t + n*p(t)."""
    best_t, best_v = 0.0, 0.0
    for lo, hi, c2, c1, c0 in penalties.quadratic_segments(spec):
        a2 = 0.5 * curv + n * c2
        a1 = n * c1 - lin
        if a2 > 0:
            t = float(np.clip(-a1 / (2 * a2), lo, hi if np.isfinite(hi) else None))
        elif a1 >= 0:
            t = lo
        else:
            if not np.isfinite(hi):
                continue
            t = hi
        v = a2 * t * t + a1 * t + n * c0
        if v < best_v:
            best_v, best_t = v, t
    return best_t


def finite_diff_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        grad[j] = (f(x + e) - f(x - e)) / (2 * h)
    return grad
