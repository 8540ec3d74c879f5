"""Scikit-learn style estimators wrapping the functional selectors.

All three estimators take the stacked arrays directly: ``X`` the fixed
design, ``y`` the response, ``groups`` the subject label per row, and
``Z`` the random-candidate design (rows aligned with ``X``).  Rows of one
subject may appear anywhere; they are gathered in first-appearance order.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .base import SolverOptions
from .data import LongitudinalDataset, SubjectBlock
from .fixed_effects import FixedProblem
from .gls import ProxyConfig, build_projection, build_proxy
from .penalties import PenaltySpec
from .pipeline import PipelineTuning, _tuned_fixed, _tuned_random, fit_alternating
from .random_effects import RandomProblem


def dataset_from_arrays(X, y, groups, Z=None) -> LongitudinalDataset:
    """Assemble a longitudinal dataset from stacked arrays and subject labels."""
    X = check_array(X, ensure_2d=True, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    groups = np.asarray(groups).ravel()
    check_consistent_length(X, y, groups)
    if Z is None:
        Z = np.zeros((len(y), 0))
    else:
        Z = check_array(Z, ensure_2d=True, dtype=float, ensure_min_features=0)
        check_consistent_length(X, Z)

    order: list = []
    rows: dict = {}
    for i, g in enumerate(groups):
        key = g.item() if hasattr(g, "item") else g
        if key not in rows:
            rows[key] = []
            order.append(key)
        rows[key].append(i)
    subjects = tuple(
        SubjectBlock(y[rows[g]], X[rows[g]], Z[rows[g]]) for g in order
    )
    return LongitudinalDataset(
        subjects,
        tuple(f"x{j}" for j in range(1, X.shape[1] + 1)),
        tuple(f"z{j}" for j in range(1, Z.shape[1] + 1)),
        tuple(str(g) for g in order),
    )


def _proxy_config(proxy, proxy_matrix, sigma2) -> ProxyConfig:
    if isinstance(proxy, ProxyConfig):
        return proxy
    return ProxyConfig(proxy, proxy_matrix, sigma2)


class FixedEffectsSelector(BaseEstimator, RegressorMixin):
    """Sparse fixed-effects estimation accounting for candidate random effects.

    Parameters
    ----------
    penalty : str
        "scad", "l1", or "mcp".
    lam : float or None
        Regularization level; None selects it on a grid by the criterion.
    a : float or None
        Penalty shape parameter (family default when None).
    criterion : str
        "aic", "bic", or "auto" (the per-target default).
    proxy : str or ProxyConfig
        "logn", "true-g", or "custom"; see ProxyConfig.
    """

    def __init__(self, penalty="scad", lam=None, a=None, criterion="auto",
                 proxy="logn", proxy_matrix=None, sigma2=None,
                 grid_size=50, grid_min_ratio=1e-3, solver_options=None):
        self.penalty = penalty
        self.lam = lam
        self.a = a
        self.criterion = criterion
        self.proxy = proxy
        self.proxy_matrix = proxy_matrix
        self.sigma2 = sigma2
        self.grid_size = grid_size
        self.grid_min_ratio = grid_min_ratio
        self.solver_options = solver_options

    def fit(self, X, y, groups=None, Z=None):
        if groups is None:
            groups = np.zeros(len(np.asarray(y).ravel()), dtype=int)
        ds = dataset_from_arrays(X, y, groups, Z)
        cfg = _proxy_config(self.proxy, self.proxy_matrix, self.sigma2)
        opts = self.solver_options or SolverOptions()
        spec = PenaltySpec(self.penalty, 1.0, self.a)
        if self.lam is not None:
            problem = FixedProblem(ds, build_proxy(ds, cfg))
            fit = problem.solve(spec.with_lam(float(self.lam)), opts)
            self.lambda_ = float(self.lam)
            self.tuning_table_ = None
        else:
            fit, self.lambda_, _, self.tuning_table_ = _tuned_fixed(
                ds, range(ds.n_random), cfg, spec, opts,
                PipelineTuning(criterion=self.criterion, grid_size=self.grid_size,
                               grid_min_ratio=self.grid_min_ratio),
            )
        self.coef_ = fit.beta
        self.active_ = fit.active
        self.result_ = fit
        self.n_features_in_ = ds.n_fixed
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, ensure_2d=True, dtype=float)
        return X @ self.coef_


class RandomEffectsSelector(BaseEstimator):
    """Group selection of random effects via the projected posterior mode.

    The fixed design enters only through the projection onto its
    orthogonal complement, so fixed-effect estimates are never needed.
    Fitted attributes: ``gamma_`` (subjects x candidates), ``selected_``,
    ``group_norms_``, and per-effect ``sd_estimates_``.
    """

    def __init__(self, penalty="scad", lam=None, a=None, criterion="auto",
                 proxy="logn", proxy_matrix=None, sigma2=None,
                 grid_size=50, grid_min_ratio=1e-3, solver_options=None):
        self.penalty = penalty
        self.lam = lam
        self.a = a
        self.criterion = criterion
        self.proxy = proxy
        self.proxy_matrix = proxy_matrix
        self.sigma2 = sigma2
        self.grid_size = grid_size
        self.grid_min_ratio = grid_min_ratio
        self.solver_options = solver_options

    def fit(self, X, y, groups, Z):
        ds = dataset_from_arrays(X, y, groups, Z)
        cfg = _proxy_config(self.proxy, self.proxy_matrix, self.sigma2)
        opts = self.solver_options or SolverOptions()
        spec = PenaltySpec(self.penalty, 1.0, self.a)
        if self.lam is not None:
            problem = RandomProblem(ds, build_projection(ds.stacked_X()), cfg)
            fit = problem.solve(spec.with_lam(float(self.lam)), opts)
            self.lambda_ = float(self.lam)
            self.tuning_table_ = None
        else:
            fit, self.lambda_, _, _, self.tuning_table_ = _tuned_random(
                ds, range(ds.n_fixed), cfg, spec, opts,
                PipelineTuning(criterion=self.criterion, grid_size=self.grid_size,
                               grid_min_ratio=self.grid_min_ratio),
            )
        self.gamma_ = fit.gamma_by_subject(ds.n_subjects)
        self.selected_ = fit.selected
        self.group_norms_ = fit.group_norms
        self.sd_estimates_ = fit.sd_estimates
        self.result_ = fit
        self.n_features_in_ = ds.n_fixed
        return self


class MixedEffectsSelector(BaseEstimator, RegressorMixin):
    """Joint selection by alternating the two selectors until sets settle."""

    def __init__(self, penalty="scad", a=None, proxy="logn", proxy_matrix=None,
                 sigma2=None, max_rounds=3, grid_size=50, grid_min_ratio=1e-3,
                 first_random_lambda_ratio=None, solver_options=None):
        self.penalty = penalty
        self.a = a
        self.proxy = proxy
        self.proxy_matrix = proxy_matrix
        self.sigma2 = sigma2
        self.max_rounds = max_rounds
        self.grid_size = grid_size
        self.grid_min_ratio = grid_min_ratio
        self.first_random_lambda_ratio = first_random_lambda_ratio
        self.solver_options = solver_options

    def fit(self, X, y, groups, Z):
        ds = dataset_from_arrays(X, y, groups, Z)
        cfg = _proxy_config(self.proxy, self.proxy_matrix, self.sigma2)
        result = fit_alternating(
            ds, cfg, PenaltySpec(self.penalty, 1.0, self.a),
            tuning=PipelineTuning(grid_size=self.grid_size,
                                  grid_min_ratio=self.grid_min_ratio),
            max_rounds=self.max_rounds,
            opts=self.solver_options or SolverOptions(),
            first_random_lambda_ratio=self.first_random_lambda_ratio,
        )
        self.coef_ = result.fixed.beta
        self.fixed_active_ = result.fixed.active
        self.random_selected_ = result.random.selected
        self.gamma_ = result.random.gamma_by_subject(ds.n_subjects)
        self.sd_estimates_ = result.random.sd_estimates
        self.trace_ = result.trace
        self.result_ = result
        self.n_features_in_ = ds.n_fixed
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, ensure_2d=True, dtype=float)
        return X @ self.coef_
