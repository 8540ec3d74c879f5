"""Information-criterion selection of the regularization level.

Fits are run along a decreasing grid with warm starts; each fit is scored
by ``n * log(2 * loss / n) + df * rate`` where ``loss`` is the smooth part
of the optimized objective and ``rate`` is 2 for AIC or, for BIC,
``log n + log p`` with p the number of candidate columns (the dimension
correction keeps false selection controlled when candidates are many).
The fixed-effects side scores each support at its refitted (unpenalized)
loss so that entry decisions are not blurred by shrinkage.
``df`` counts active coefficients on the fixed side; on the random side
it is the effective dimension of the prior-regularized fit on the
selected groups, since every group carries one coefficient per subject.
Ties are broken toward the larger (sparser) lam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .base import TuningError

DEFAULT_GRID_SIZE = 50
DEFAULT_GRID_MIN_RATIO = 1e-3

# default criterion per (target, penalty family): BIC throughout for fixed
# effects; AIC for concave penalties and BIC for L1 on the random side
_PROTOCOL = {
    ("fixed", "scad"): "bic",
    ("fixed", "l1"): "bic",
    ("fixed", "mcp"): "bic",
    ("random", "scad"): "aic",
    ("random", "l1"): "bic",
    ("random", "mcp"): "aic",
}


def default_criterion(target: str, penalty_family: str) -> str:
    """Criterion used when the caller asks for 'auto'."""
    key = (target.lower(), penalty_family.lower())
    if key not in _PROTOCOL:
        raise ValueError(f"no default criterion for {key}")
    return _PROTOCOL[key]


# the head sits a hair above the kill threshold so the empty model at the
# head is strictly dual-feasible rather than exactly on the boundary
HEAD_NUDGE = 1.001


def make_grid(lam_max: float, size: int = DEFAULT_GRID_SIZE,
              min_ratio: float = DEFAULT_GRID_MIN_RATIO) -> np.ndarray:
    """Log-spaced decreasing grid from just above lam_max down to
    min_ratio * lam_max."""
    if lam_max <= 0:
        raise TuningError("lambda_max must be positive to build a grid")
    if size == 1:
        return np.array([HEAD_NUDGE * lam_max])
    return np.geomspace(HEAD_NUDGE * lam_max, min_ratio * lam_max, size)


@dataclass(frozen=True)
class TuningSpec:
    """Criterion choice and grid for one selection problem."""

    criterion: str           # "aic", "bic", or "auto"
    target: str              # "fixed" or "random"
    grid: np.ndarray | None = None
    grid_size: int = DEFAULT_GRID_SIZE
    grid_min_ratio: float = DEFAULT_GRID_MIN_RATIO

    def __post_init__(self):
        crit = self.criterion.lower()
        if crit not in ("aic", "bic", "auto"):
            raise ValueError("criterion must be 'aic', 'bic', or 'auto'")
        object.__setattr__(self, "criterion", crit)
        tgt = self.target.lower()
        if tgt not in ("fixed", "random"):
            raise ValueError("target must be 'fixed' or 'random'")
        object.__setattr__(self, "target", tgt)
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=float)
            if g.ndim != 1 or len(g) == 0:
                raise TuningError("grid must be a nonempty 1-d array")
            if np.any(g <= 0) or np.any(np.diff(g) >= 0):
                raise TuningError("grid must be strictly decreasing and positive")
            object.__setattr__(self, "grid", g)

    def resolve_criterion(self, penalty_family: str) -> str:
        if self.criterion == "auto":
            return default_criterion(self.target, penalty_family)
        return self.criterion


@dataclass
class TuningResult:
    """Chosen lam with the per-lam criterion table and the winning fit."""

    lam: float
    criterion: str
    best: object                       # fit result at the chosen lam
    table: list[dict] = field(default_factory=list)
    path: list[object] = field(default_factory=list)

    @property
    def n_evaluated(self) -> int:
        return len(self.table)


def criterion_value(loss: float, df: float, n: int, criterion: str,
                    n_candidates: int = 1) -> float:
    """n * log(2 * loss / n) + df * rate with a floor keeping the log finite."""
    if criterion == "aic":
        rate = 2.0
    else:
        rate = math.log(n) + math.log(max(n_candidates, 1))
    scaled = max(2.0 * loss / n, 1e-300)
    return n * math.log(scaled) + df * rate


def _fit_df(fit, target: str) -> float:
    # random-side fits expose the effective dimension of the regularized
    # solve; each selected group carries one coefficient per subject, so
    # the raw group count would under-charge the criterion
    if target == "random":
        return float(fit.edof)
    return float(fit.df)


def select_lambda(fit_at, spec: TuningSpec, penalty_family: str, n: int,
                  lam_max: float | None = None, n_candidates: int = 1,
                  keep_path: bool = False) -> TuningResult:
    """Warm-started grid search minimizing the chosen information criterion.

    ``fit_at(lam, warm)`` must return a fit result exposing ``quad_loss``,
    ``df`` (plus ``edof`` for random-side fits), and a warm-startable
    coefficient vector understood by the next call's ``warm`` argument.
    Failed grid points are recorded and skipped; all points failing is an
    error.
    """
    crit = spec.resolve_criterion(penalty_family)
    grid = spec.grid
    if grid is None:
        if lam_max is None or lam_max <= 0:
            raise TuningError("either an explicit grid or a positive lambda_max is required")
        grid = make_grid(lam_max, spec.grid_size, spec.grid_min_ratio)

    best_val = math.inf
    best_fit = None
    best_lam = None
    warm = None
    table = []
    path = []
    for lam in grid:
        try:
            fit = fit_at(float(lam), warm)
        except Exception as exc:  # a single bad grid point must not kill the path
            table.append({"lam": float(lam), "df": None, "loss": None,
                          "criterion": None, "error": str(exc)})
            continue
        warm = fit
        if keep_path:
            path.append(fit)
        df = _fit_df(fit, spec.target)
        val = criterion_value(fit.quad_loss, df, n, crit, n_candidates)
        table.append({"lam": float(lam), "df": df,
                      "loss": fit.quad_loss, "criterion": val})
        # strict inequality implements the larger-lam tie rule on the
        # decreasing grid
        if val < best_val:
            best_val, best_fit, best_lam = val, fit, float(lam)
    if best_fit is None:
        raise TuningError("every fit on the tuning grid failed")
    return TuningResult(lam=best_lam, criterion=crit, best=best_fit,
                        table=table, path=path)


def select_lambda_by_set_score(fit_at, grid, score_of_set,
                               support_of=lambda fit: fit.selected) -> TuningResult:
    """Walk a warm-started path and score each distinct support once.

    Used when the per-fit loss cannot discriminate (saturated problems):
    the path only proposes candidate supports and ``score_of_set`` judges
    them on its own scale.  Ties keep the largest lam producing the best
    support.
    """
    best_val = math.inf
    best_fit = None
    best_lam = None
    warm = None
    table = []
    scores: dict = {}
    for lam in grid:
        try:
            fit = fit_at(float(lam), warm)
        except Exception as exc:
            table.append({"lam": float(lam), "support": None, "score": None,
                          "error": str(exc)})
            continue
        warm = fit
        support = tuple(support_of(fit))
        if support not in scores:
            scores[support] = float(score_of_set(support))
        val = scores[support]
        table.append({"lam": float(lam), "support": list(support), "score": val})
        if val < best_val:
            best_val, best_fit, best_lam = val, fit, float(lam)
    if best_fit is None:
        raise TuningError("every fit on the tuning grid failed")
    return TuningResult(lam=best_lam, criterion="marginal", best=best_fit,
                        table=table)
