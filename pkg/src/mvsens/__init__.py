"""Multivariate one-sided sensitivity analysis for matched observational
studies: worst-case hidden bias against the best coherent combination of
outcome statistics, chi-bar-squared reference distributions, changepoint
search, and closed testing."""

__version__ = "0.1.0"

from .chibar import (
    ChiBarSpec,
    ChiBarWeights,
    chibar_cdf,
    chibar_quantile,
    chibar_sample,
    chibar_weights,
    perlman_pvalue,
)
from .critical import (
    CorrelationBox,
    CriticalOpts,
    chibar_critical_value,
    correlation_bounds,
    correlation_box,
    worst_case_quantile,
)
from .feasible import (
    Moments,
    ProbVector,
    compute_moments,
    extreme_points_pairs,
    project_onto_PGamma,
    uniform_probs,
)
from .game import (
    GameResult,
    LambdaSpec,
    SolveOptions,
    coherent_sup,
    finite_sup,
    solve_worst_case,
    subgradient,
)
from .inference import (
    ChangepointResult,
    ClosedChangepoints,
    ClosedTestingResult,
    GammaRecord,
    SensitivityReport,
    bonferroni_changepoints,
    bonferroni_per_outcome,
    changepoint_gamma,
    closed_testing,
    closed_testing_changepoints,
    global_test,
)
from .oracle import (
    AssignmentDist,
    AssignmentSpace,
    ConfounderVector,
    DistTable,
    biased_probs,
    exact_statistic_distribution,
    exact_worst_case_pvalue,
    unit_probs_from_assignment_dist,
)
from .simulate import (
    DesignSensitivity,
    PowerTable,
    SimScenario,
    design_sensitivity_estimate,
    generate_paired_data,
    load_scenarios,
    power_curve,
    type1_table,
    unconstrained_test,
)
from .study import (
    MatchedStudy,
    ScoreMatrix,
    Stratum,
    StudyError,
    aligned_rank_scores,
    huber_pair_scores,
    load_study,
    observed_statistics,
    study_from_arrays,
    study_from_pair_differences,
    user_scores,
)
