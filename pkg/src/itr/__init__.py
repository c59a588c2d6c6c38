"""Multi-robust single-index kernel estimation of individualized treatment regimes.

Estimates a possibly non-monotone treatment-difference function of a scalar
covariate index, the index coefficients through an augmented
inverse-probability estimating equation, the induced treatment rule and its
value, and plug-in or bootstrap uncertainty for all of them.
"""

from .contrast import (
    ContrastEstimator,
    CVResult,
    anchored_beta,
    cond_mean_xl,
    cv_bandwidth,
    default_cv_grid,
    index_values,
    pilot_bandwidth,
)
from .data import Dataset
from .errors import (
    DegenerateWindowError,
    EstimationError,
    FlatCrossingError,
    InputError,
    NonConvergenceError,
    RankDeficiencyError,
    SeparationError,
)
from .index_fit import (
    BetaSolution,
    EstimatingContext,
    estimating_equation,
    multi_start_diagnostic,
    ols_interaction_init,
    solve_index,
)
from .inference import (
    CurveBand,
    InfluenceAssembly,
    RootInference,
    alpha_influence,
    beta_covariance,
    gamma_influence,
    residual_bootstrap_band,
    root_inference,
    sandwich_alpha,
    sandwich_gamma,
    value_sigma,
)
from .kernels import KernelSpec, kde, kernel_eval, scaled_weights
from .nuisance import (
    NuisanceFit,
    OutcomeBasis,
    OutcomeModel,
    PropensityModel,
    fit_outcome_gee,
    fit_propensity,
    fixed_propensity,
    predict_outcome,
    predict_propensity,
)
from .pipeline import EstimatorSettings, PolicyReport, fit_policy
from .policy import (
    RootSet,
    TreatmentRule,
    ValueEstimate,
    assign,
    default_root_interval,
    find_roots,
    indicator_ramp,
    smoothed_value,
    value_estimate,
)
from .simlab import (
    Scenario,
    StudyReport,
    TargetRow,
    case_models,
    generate,
    run_study,
    scenario_by_number,
    true_roots,
    true_value_mc,
)

__version__ = "0.1.0"
