"""Granular instrumental-variables estimation that stays consistent under
heterogeneous spillover coefficients.

The package estimates the coefficients of ``r_it = phi_i r_St + u_it``
(outcomes loading on their own size-weighted aggregate) from pairwise
orthogonality of the idiosyncratic shocks, with asymptotic inference, an
overidentification test, a coefficient-homogeneity test, classic granular
IV baselines for comparison, and a Monte Carlo harness.
"""

__version__ = "0.1.0"

from .estimators import (
    EstimationResult,
    OptimizerConfig,
    giv_estimand_closed_form,
    giv_estimate,
    ols_estimate,
    rgiv_estimate,
    rgiv_restricted_estimate,
    two_step_estimate,
)
from .exceptions import (
    ConfigurationError,
    DegenerateDataWarning,
    DegenerateRegressorError,
    DimensionError,
    EstimationError,
    NotOveridentifiedError,
    OptimizerInconsistencyError,
    RankDeficiencyError,
    RgivError,
    SingularEstimandError,
    ValidationError,
    WeakInstrumentError,
)
from .inference import (
    ConfidenceInterval,
    TestResult,
    aggregate_ci,
    homogeneity_test,
    j_test,
    rgiv_avar,
    sandwich_avar,
)
from .model import (
    PanelData,
    ParameterSpace,
    analytic_jacobian,
    cue_weight_matrix,
    equal_weighted,
    gmm_objective,
    moment_function,
    moment_pairs,
    population_moments,
    residuals,
    size_weighted,
)
from .simulation import (
    DgpSpec,
    ScenarioReport,
    builtin_scenario,
    generate_panel,
    power_law_sizes,
    run_scenario,
    spec_from_payload,
)

__all__ = [
    "__version__",
    "ConfidenceInterval",
    "ConfigurationError",
    "DegenerateDataWarning",
    "DegenerateRegressorError",
    "DgpSpec",
    "DimensionError",
    "EstimationError",
    "EstimationResult",
    "NotOveridentifiedError",
    "OptimizerConfig",
    "OptimizerInconsistencyError",
    "PanelData",
    "ParameterSpace",
    "RankDeficiencyError",
    "RgivError",
    "ScenarioReport",
    "SingularEstimandError",
    "TestResult",
    "ValidationError",
    "WeakInstrumentError",
    "aggregate_ci",
    "analytic_jacobian",
    "builtin_scenario",
    "cue_weight_matrix",
    "equal_weighted",
    "generate_panel",
    "giv_estimand_closed_form",
    "giv_estimate",
    "gmm_objective",
    "homogeneity_test",
    "j_test",
    "moment_function",
    "moment_pairs",
    "ols_estimate",
    "population_moments",
    "power_law_sizes",
    "residuals",
    "rgiv_avar",
    "rgiv_estimate",
    "rgiv_restricted_estimate",
    "run_scenario",
    "sandwich_avar",
    "size_weighted",
    "spec_from_payload",
    "two_step_estimate",
]
