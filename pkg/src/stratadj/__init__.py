"""Randomization-based estimation and inference for stratified randomized experiments."""

from .core import (
    ConditionDiagnostics,
    ExperimentDesign,
    ObservedDataset,
    Population,
    StratumDesign,
    StratumSummary,
    condition_diagnostics,
    stratum_summaries,
    validate_dataset,
)
from .estimators import (
    METHODS,
    EstimateReport,
    WlsProblem,
    confidence_interval,
    estimate,
    estimate_ols,
    estimate_ols_design_matrix,
    estimate_ols_int,
    estimate_unadjusted,
    fit_pooled_wls,
    fit_stratum_ols,
    wls_solve,
)
from .oracle import (
    PopulationMoments,
    ProjectionSet,
    VarianceGaps,
    exact_estimator_moments,
    population_moments,
    population_projections,
    run_identity_suite,
    variance_estimator_bias,
    variance_gaps,
)
from .randomization import (
    Assignment,
    count_assignments,
    enumerate_assignments,
    sample_assignment,
    substream,
)
from .simulation import (
    MetricsRow,
    MetricsTable,
    ScenarioConfig,
    generate_population,
    run_monte_carlo,
    standardized_estimates,
)

__version__ = "0.1.0"
