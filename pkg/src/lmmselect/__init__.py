"""Penalized selection and estimation of fixed and random effects in
linear mixed models for longitudinal data.

The fixed-effects side minimizes a concave-penalized quadratic in a proxy
precision matrix that stands in for the unknown random-effect covariance;
the random-effects side selects entire per-effect groups of realizations
through a projected, prior-regularized group penalty.  Both are exposed
functionally, as scikit-learn estimators, and through a command-line
interface with a Monte Carlo study runner.
"""

from .base import (
    CsvParseError,
    DegenerateColumnError,
    DimensionError,
    FactorizationError,
    LmmSelectError,
    SchemaError,
    SolverOptions,
    TuningError,
)
from .data import (
    CsvSchema,
    LongitudinalDataset,
    StandardizationRecord,
    SubjectBlock,
    load_csv,
    stack,
    standardize,
    unstack,
    write_csv,
)
from .estimators import (
    FixedEffectsSelector,
    MixedEffectsSelector,
    RandomEffectsSelector,
    dataset_from_arrays,
)
from .fixed_effects import (
    FixedFitResult,
    FixedProblem,
    KktCertificate,
    fit_fixed,
    kkt_check_fixed,
    objective_fixed,
)
from .gls import (
    FixedProjection,
    ProxyConfig,
    ProxyDiagnostics,
    ProxyPrecision,
    build_projection,
    build_proxy,
    proxy_diagnostics,
    verify_precision_identity,
    whiten_residual,
)
from .penalties import PenaltySpec, derivative, second_derivative, value
from .pipeline import (
    PipelineResult,
    PipelineTuning,
    RefitResult,
    fit_alternating,
    refit_selected,
)
from .random_effects import (
    GroupKktCertificate,
    RandomFitResult,
    RandomProblem,
    fit_random,
    kkt_check_random,
    objective_random,
    oracle_bayes,
)
from .simulation import (
    Example1Config,
    Example2Config,
    SimStudyReport,
    StudyConfig,
    generate_example1,
    generate_example2,
    relative_losses,
    run_study,
    selection_metrics,
)
from .tuning import TuningResult, TuningSpec, default_criterion, make_grid, select_lambda

__version__ = "0.1.0"
