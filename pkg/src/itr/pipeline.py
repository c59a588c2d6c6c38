"""End-to-end fit: nuisances, index, bandwidth, contrast, roots, value.

Both the simulation studies and the batch CLI drive this one orchestration so
their numbers can never drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .contrast import (
    ContrastEstimator,
    cv_bandwidth,
    default_cv_grid,
    index_values,
)
from .data import Dataset
from .errors import EstimationError, FlatCrossingError, InputError
from .index_fit import (
    BetaSolution,
    EstimatingContext,
    solve_index,
    solve_index_multistart,
)
from .inference import (
    CurveBand,
    InfluenceAssembly,
    RootInference,
    beta_covariance,
    root_inference,
    value_sigma,
)
from .kernels import KernelSpec
from .nuisance import (
    NuisanceFit,
    OutcomeBasis,
    fit_outcome_gee,
    fit_propensity,
    fixed_propensity,
)
from .policy import (
    RootSet,
    TreatmentRule,
    ValueEstimate,
    default_root_interval,
    find_roots,
    value_estimate,
)

__all__ = ["EstimatorSettings", "PolicyReport", "fit_policy"]


@dataclass(frozen=True)
class EstimatorSettings:
    """Every tunable of the fitting pipeline, JSON-serialisable.

    The pilot constant default suits standardised simulation designs and is
    calibrated so the index-solving windows stay inside the admissible
    undersmoothing range at desk-scale sample sizes; observational fits with
    the quartic kernel conventionally run different constants, so ``pilot_c``
    is always surfaced in configs.
    """

    kernel: str = "epanechnikov"
    pilot_c: float = 0.7
    cv_lo: float = 0.2
    cv_hi: float = 3.0
    cv_size: int = 20
    solver_init: object = "ols"  # "ols" | "zeros" | explicit coefficient list
    solver_tol: float = 1e-6
    solver_max_iter: int = 200
    clip_floor: float = 1e-3
    propensity_form: str = "logistic_linear"
    propensity_fixed_value: float | None = None
    include_intercept: bool = True
    outcome_basis: OutcomeBasis = field(default_factory=lambda: OutcomeBasis("linear"))
    root_lo_q: float = 0.025
    root_hi_q: float = 0.975
    root_grid_points: int = 400
    level: float = 0.95

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(self.kernel)

    def with_case_models(self, propensity_form=None, fixed_value=None, basis=None):
        changes = {}
        if propensity_form is not None:
            changes["propensity_form"] = propensity_form
        changes["propensity_fixed_value"] = fixed_value
        if basis is not None:
            changes["outcome_basis"] = basis
        return replace(self, **changes)


@dataclass
class PolicyReport:
    """Everything a fitted policy reports: estimates, uncertainty, rule."""

    beta: np.ndarray
    beta_cov: np.ndarray
    beta_sd: np.ndarray
    beta_ci: np.ndarray
    solution: BetaSolution
    assembly: InfluenceAssembly | None
    h_opt: float
    cv_table: tuple
    root_set: RootSet
    root_inferences: list
    value: ValueEstimate
    rule: TreatmentRule
    nuisances: NuisanceFit
    level: float
    band: CurveBand | None = None

    @property
    def value_sd(self) -> float | None:
        if self.value.sigma_hat is None:
            return None
        return self.value.sigma_hat / np.sqrt(self.value.n)


def _initial_guess(data: Dataset, settings: EstimatorSettings):
    init = settings.solver_init
    if init == "ols":
        return None  # EstimatingContext computes the interaction start
    if init == "zeros":
        return np.zeros(data.d - 1)
    arr = np.asarray(init, dtype=float).ravel()
    if arr.size != data.d - 1:
        raise InputError(f"explicit solver init must have {data.d - 1} entries")
    return arr


def fit_nuisances(data: Dataset, settings: EstimatorSettings) -> NuisanceFit:
    if settings.propensity_fixed_value is not None:
        prop = fixed_propensity(settings.propensity_fixed_value, settings.clip_floor)
    else:
        prop = fit_propensity(
            data,
            settings.propensity_form,
            include_intercept=settings.include_intercept,
            clip_floor=settings.clip_floor,
        )
    out = fit_outcome_gee(data, settings.outcome_basis)
    return NuisanceFit(prop, out)


def fit_policy(
    data: Dataset,
    settings: EstimatorSettings = EstimatorSettings(),
    inference: bool = True,
) -> PolicyReport:
    """Run the whole estimation pipeline on one dataset.

    ``inference=False`` skips the covariance, root-uncertainty and
    value-variance stages (used by rate experiments that only need point
    estimates).
    """
    kernel = settings.kernel_spec()
    nuis = fit_nuisances(data, settings)
    init = _initial_guess(data, settings)
    ctx = EstimatingContext(
        data, nuis, kernel, pilot_c=settings.pilot_c, beta_init=init
    )
    if settings.solver_init == "ols":
        # default: multistart over shape-agnostic candidate inits
        sol = solve_index_multistart(
            ctx, tol=settings.solver_tol, max_iter=settings.solver_max_iter
        )
    else:
        sol = solve_index(
            ctx, tol=settings.solver_tol, max_iter=settings.solver_max_iter
        )
    if not sol.converged:
        raise EstimationError(
            f"index solver did not converge (equation norm {sol.equation_norm:.2e})"
        )

    u = index_values(data, sol.beta)
    grid = default_cv_grid(u, settings.cv_lo, settings.cv_hi, settings.cv_size)
    cv_res = cv_bandwidth(data, nuis, sol.beta, kernel, grid)
    q_est = ContrastEstimator(data, nuis, sol.beta, kernel, cv_res.h_opt)
    rule = TreatmentRule(sol.beta, q_est)

    interval = default_root_interval(u, settings.root_lo_q, settings.root_hi_q)
    step = (interval[1] - interval[0]) / settings.root_grid_points
    root_set = find_roots(q_est, interval, step)

    val = value_estimate(data, nuis, rule)

    p = data.d - 1
    beta_cov = np.zeros((p, p))
    beta_sd = np.zeros(p)
    beta_ci = np.zeros((p, 2))
    assembly = None
    root_infs: list = []
    if inference:
        beta_cov, assembly = beta_covariance(ctx, sol, inference_h=cv_res.h_opt)
        beta_sd = np.sqrt(np.clip(np.diag(beta_cov), 0.0, None))
        z = norm.ppf(1.0 - (1.0 - settings.level) / 2.0)
        beta_ci = np.column_stack(
            [sol.beta_l - z * beta_sd, sol.beta_l + z * beta_sd]
        )
        for r in root_set.roots:
            try:
                root_infs.append(root_inference(q_est, r, data, nuis))
            except (FlatCrossingError, EstimationError, InputError):
                root_infs.append(RootInference(root=float(r), bias_hat=np.nan, sd_hat=np.nan))
        val.sigma_hat = value_sigma(data, nuis, rule, assembly)

    return PolicyReport(
        beta=sol.beta,
        beta_cov=beta_cov,
        beta_sd=beta_sd,
        beta_ci=beta_ci,
        solution=sol,
        assembly=assembly,
        h_opt=cv_res.h_opt,
        cv_table=cv_res.table,
        root_set=root_set,
        root_inferences=root_infs,
        value=val,
        rule=rule,
        nuisances=nuis,
        level=settings.level,
    )
