"""Standard errors: sandwich covariances, plug-in asymptotics and a bootstrap.

All population quantities in the asymptotic formulas are replaced by their
fitted counterparts.  Under that substitution the propensity-ratio and
outcome-discrepancy weighted correction terms of the value variance vanish
identically; ``value_sigma`` asserts the collapse numerically on every run
instead of assuming it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contrast import ContrastEstimator, anchored_beta
from .data import Dataset
from .errors import (
    DegenerateWindowError,
    EstimationError,
    FlatCrossingError,
    InputError,
    RankDeficiencyError,
)
from .index_fit import BetaSolution, EstimatingContext, _equation_with_count
from .kernels import kde
from .nuisance import NuisanceFit, OutcomeModel, PropensityModel, fit_outcome_gee
from .policy import TreatmentRule, _summands

__all__ = [
    "InfluenceAssembly",
    "RootInference",
    "CurveBand",
    "sandwich_gamma",
    "sandwich_alpha",
    "gamma_influence",
    "alpha_influence",
    "beta_covariance",
    "root_inference",
    "value_sigma",
    "residual_bootstrap_band",
]


def _symmetrize(m):
    return 0.5 * (m + m.T)


# ---------------------------------------------------------------------------
# nuisance-model sandwiches and influence rows
# ---------------------------------------------------------------------------


def sandwich_gamma(data: Dataset, model: PropensityModel) -> np.ndarray:
    """Misspecification-robust covariance of the propensity coefficients.

    Bread is the average log-likelihood Hessian, meat the average outer
    product of scores.  A fixed (non-estimated) propensity has zero
    covariance by construction.
    """
    p = model.gamma.size
    if not model.estimated:
        return np.zeros((p, p))
    info = model.information(data)  # negative of the average Hessian
    scores = model.score_rows(data)
    meat = scores.T @ scores / data.n
    try:
        half = np.linalg.solve(info, meat)
        cov = np.linalg.solve(info, half.T).T / data.n
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("singular information matrix") from exc
    return _symmetrize(cov)


def sandwich_alpha(data: Dataset, model: OutcomeModel, weight_spec: str = "basis") -> np.ndarray:
    """Heteroscedasticity-robust covariance of the outcome coefficients.

    Empirical means run over the control arm only, matching the fit.
    """
    controls = data.a == 0.0
    n0 = int(np.count_nonzero(controls))
    if n0 == 0:
        raise InputError("control arm is empty")
    xc = data.x[controls]
    design = model.basis.design(xc)
    if weight_spec == "basis":
        weights = design
    elif callable(weight_spec):
        weights = np.atleast_2d(np.asarray(weight_spec(xc), dtype=float))
    else:
        raise InputError("weight_spec must be 'basis' or a callable")
    resid = data.y[controls] - design @ model.alpha
    bread = weights.T @ design / n0
    meat = (weights * resid[:, None]).T @ (weights * resid[:, None]) / n0
    try:
        half = np.linalg.solve(bread, meat)
        cov = np.linalg.solve(bread, half.T).T / n0
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("singular bread matrix in outcome sandwich") from exc
    return _symmetrize(cov)


def gamma_influence(data: Dataset, model: PropensityModel) -> np.ndarray:
    """Per-observation influence rows of the propensity fit, ``(n, d_gamma)``.

    Empty (zero-column) for a fixed propensity, which carries no estimation
    variability.
    """
    if not model.estimated:
        return np.zeros((data.n, 0))
    info = model.information(data)
    scores = model.score_rows(data)
    try:
        return np.linalg.solve(info, scores.T).T
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("singular information matrix") from exc


def alpha_influence(data: Dataset, model: OutcomeModel, weight_spec: str = "basis") -> np.ndarray:
    """Influence rows of the outcome fit on the full-sample scale, ``(n, d_alpha)``.

    Treated rows are zero; control rows are rescaled by ``n / n0`` so that
    the coefficient error is the plain average of the rows.
    """
    controls = data.a == 0.0
    n0 = int(np.count_nonzero(controls))
    if n0 == 0:
        raise InputError("control arm is empty")
    xc = data.x[controls]
    design = model.basis.design(xc)
    if weight_spec == "basis":
        weights = design
    elif callable(weight_spec):
        weights = np.atleast_2d(np.asarray(weight_spec(xc), dtype=float))
    else:
        raise InputError("weight_spec must be 'basis' or a callable")
    resid = data.y[controls] - design @ model.alpha
    bread = weights.T @ design / n0
    rows_c = np.linalg.solve(bread, (weights * resid[:, None]).T).T
    out = np.zeros((data.n, model.alpha.size))
    out[controls] = rows_c * (data.n / n0)
    return out


# ---------------------------------------------------------------------------
# covariance of the index estimate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InfluenceAssembly:
    """Influence rows and derivative matrices behind the index covariance."""

    phi_beta: np.ndarray
    phi_gamma: np.ndarray
    phi_alpha: np.ndarray
    b_hat: np.ndarray
    b_gamma_hat: np.ndarray
    b_alpha_hat: np.ndarray


INFERENCE_REL_STEP = 5e-3
_OFFSET_MULTIPLES = (-3.0, -1.0, 1.0, 3.0)


def _ls_slope_jacobian(fun, values, rel_step):
    """Columnwise least-squares slope of ``fun`` over symmetric offsets.

    The kernel-sum estimating function is rough at fine scales; a slope
    fitted across several coarse offsets reads the macroscopic derivative
    (the object the asymptotics are about) instead of the local one.
    """
    values = np.asarray(values, dtype=float)
    p_out = None
    jac = None
    for k in range(values.size):
        step = rel_step * max(1.0, abs(values[k]))
        offsets = np.array(_OFFSET_MULTIPLES) * step
        evals = []
        for o in offsets:
            bumped = values.copy()
            bumped[k] += o
            evals.append(fun(bumped))
        evals = np.asarray(evals)
        if jac is None:
            p_out = evals.shape[1]
            jac = np.empty((p_out, values.size))
        jac[:, k] = offsets @ evals / float(offsets @ offsets)
    if jac is None:
        jac = np.zeros((0, 0))
    return jac


def _nuisance_perturbed(ctx, param, values):
    prop, out = ctx.nuisances
    if param == "gamma":
        return NuisanceFit(
            PropensityModel(
                prop.form, values, prop.include_intercept, prop.clip_floor, prop.estimated
            ),
            out,
        )
    return NuisanceFit(prop, OutcomeModel(out.basis, values))


def _nuisance_jacobian(ctx, beta_l, param, rel_step=INFERENCE_REL_STEP):
    """Derivative of the estimating function in a nuisance coefficient
    vector, with all kernel plug-ins recomputed per perturbation."""
    prop, out = ctx.nuisances
    values = prop.gamma if param == "gamma" else out.alpha

    def fun(v):
        g, _ = _equation_with_count(
            ctx, beta_l, nuisances=_nuisance_perturbed(ctx, param, v)
        )
        return g

    return _ls_slope_jacobian(fun, values, rel_step)


def beta_covariance(
    ctx: EstimatingContext,
    solution: BetaSolution,
    rel_step: float = INFERENCE_REL_STEP,
    inference_h: float | None = None,
    slack_z: float = 1.1,
):
    """Plug-in covariance of the free index components.

    The bread is the numerical Jacobian of the empirical estimating function
    at the solution, fitted as a least-squares slope over coarse offsets
    (which reads the macroscopic derivative through the kernel-sum's
    fine-scale roughness).  The meat averages squared influence rows
    combining the direct term with the propensity- and outcome-fit
    contributions, each propagated through the numerical cross-derivatives
    of the estimating function.

    ``inference_h`` evaluates every kernel plug-in at a (typically larger)
    bandwidth than the solving bandwidth; the derivative matrices of the
    smoother surface are far better conditioned and estimate the same
    asymptotic objects.

    ``slack_z`` widens the meat for the solver's acceptance slack: the
    equation is only ever solved to within its own sampling precision, and
    the stopping point occupies a box of that scale around the exact root,
    adding ``z^2/3`` of the per-component equation variance.  The default is
    calibrated below the solver's acceptance constant because minimisation
    concentrates the stopping point well inside the box.  Set 0 to disable.
    Returns ``(covariance, InfluenceAssembly)``.
    """
    if not solution.converged:
        raise EstimationError("index solution did not converge; no covariance")
    if inference_h is not None:
        ctx = EstimatingContext(
            ctx.data,
            ctx.nuisances,
            ctx.kernel,
            pilot_h=float(inference_h),
            beta_init=solution.beta_l,
            max_degenerate_share=ctx.max_degenerate_share,
        )
    data = ctx.data
    beta_l = solution.beta_l
    p = beta_l.size
    if p == 0:
        assembly = InfluenceAssembly(
            np.zeros((data.n, 0)),
            gamma_influence(data, ctx.nuisances.propensity),
            alpha_influence(data, ctx.nuisances.outcome),
            np.zeros((0, 0)),
            np.zeros((0, 0)),
            np.zeros((0, 0)),
        )
        return np.zeros((0, 0)), assembly

    def fun(b):
        return _equation_with_count(ctx, b)[0]

    b_hat = _ls_slope_jacobian(fun, beta_l, rel_step)

    est = ContrastEstimator(
        data, ctx.nuisances, anchored_beta(beta_l), ctx.kernel, ctx.pilot_h
    )
    q_vals, q_ok = est.evaluate_masked(est.u)
    e_vals, e_ok = est.cond_mean_xl_masked(est.u)
    keep = q_ok & e_ok
    xl = data.x[:, 1:]
    phi_beta = np.zeros((data.n, p))
    bracket = est.r[keep] - est.wa[keep] * q_vals[keep]
    phi_beta[keep] = bracket[:, None] * (xl[keep] - e_vals[keep])

    prop, out = ctx.nuisances
    phi_gamma = gamma_influence(data, prop)
    phi_alpha = alpha_influence(data, out)
    if phi_gamma.shape[1]:
        b_gamma = _nuisance_jacobian(ctx, beta_l, "gamma", rel_step)
    else:
        b_gamma = np.zeros((p, 0))
    b_alpha = _nuisance_jacobian(ctx, beta_l, "alpha", rel_step)

    rows = phi_beta + phi_gamma @ b_gamma.T + phi_alpha @ b_alpha.T
    v1 = rows.T @ rows / data.n
    v1_widened = v1 + (slack_z**2 / 3.0) * np.diag(np.diag(v1))
    try:
        half = np.linalg.solve(b_hat, v1_widened)
        cov = np.linalg.solve(b_hat, half.T).T / data.n
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("singular estimating-function Jacobian") from exc
    assembly = InfluenceAssembly(phi_beta, phi_gamma, phi_alpha, b_hat, b_gamma, b_alpha)
    return _symmetrize(cov), assembly


# ---------------------------------------------------------------------------
# decision-boundary root inference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RootInference:
    """Bias and standard-deviation estimates for one contrast root."""

    root: float
    bias_hat: float
    sd_hat: float


def _local_quadratic(ts, values, z):
    """Least-squares quadratic in (t - z); returns (level, slope, curvature)."""
    t = ts - z
    design = np.column_stack([np.ones_like(t), t, t * t])
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    return coef[0], coef[1], 2.0 * coef[2]


def root_inference(
    q: ContrastEstimator,
    root: float,
    data: Dataset,
    nuisances: NuisanceFit,
    window_points: int = 21,
) -> RootInference:
    """Plug-in bias and sd of a contrast zero crossing.

    Derivatives of the contrast and of the index density come from local
    quadratic fits over a window of width four bandwidths around the root;
    conditional second moments come from kernel local averages of the
    squared inverse-probability residuals.  A near-flat crossing
    (``|slope| < 1e-4``) is an error because the root is then not locally
    identified.
    """
    if not isinstance(q, ContrastEstimator):
        raise InputError("root_inference needs a fitted contrast estimator")
    root = float(root)
    q_at_root = q.evaluate(np.array([root]))[0]
    if abs(q_at_root) > 1e-6:
        raise InputError(f"|q(root)| = {abs(q_at_root):.2e} exceeds the root tolerance")
    h = q.h
    ts = np.linspace(root - 2.0 * h, root + 2.0 * h, window_points)
    q_vals, q_ok = q.evaluate_masked(ts)
    if np.count_nonzero(q_ok) < 5:
        raise DegenerateWindowError("too few evaluable points around the root")
    _, q_slope, q_curv = _local_quadratic(ts[q_ok], q_vals[q_ok], root)
    if abs(q_slope) < 1e-4:
        raise FlatCrossingError(
            f"contrast slope {q_slope:.2e} at root {root:.4g} is too flat"
        )

    f_vals = np.array([kde(q.kernel, h, q.u, t) for t in ts])
    f_at_root = kde(q.kernel, h, q.u, root)
    _, f_slope, _ = _local_quadratic(ts, f_vals, root)
    if f_at_root <= 0.0:
        raise DegenerateWindowError("index density estimate vanished at the root")

    # conditional second moments of the arm-wise weighted residuals
    resid = data.y - q.mu
    s1 = data.a * resid**2 / q.pi**2
    s0 = (1.0 - data.a) * resid**2 / (1.0 - q.pi) ** 2
    w = q.kernel((q.u - root) / h) / h
    w_sum = w.sum()
    if w_sum < q.floor:
        raise DegenerateWindowError("no kernel mass at the root")
    m1 = float(w @ s1 / w_sum)
    m0 = float(w @ s0 / w_sum)

    bias = (
        -(h**2)
        * (f_slope / f_at_root + q_curv / (2.0 * q_slope))
        * q.kernel.second_moment
    )
    var = (
        (m1 + m0)
        * q.kernel.l2_norm_sq
        / (data.n * h * f_at_root * q_slope**2)
    )
    return RootInference(root=root, bias_hat=float(bias), sd_hat=float(np.sqrt(max(var, 0.0))))


# ---------------------------------------------------------------------------
# value-function variance
# ---------------------------------------------------------------------------


def value_sigma(
    data: Dataset,
    nuisances: NuisanceFit,
    rule: TreatmentRule,
    assembly: InfluenceAssembly | None = None,
    max_degenerate_share: float = 0.05,
) -> float:
    """Plug-in standard deviation scale for the value estimate.

    With every population nuisance replaced by its fit, the index-, outcome-
    and propensity-estimation corrections to the value variance carry factors
    that vanish identically (fitted-over-fitted propensity ratios and
    fitted-minus-fitted outcome discrepancies), so the variance collapses to
    the second moment of the centered value summand.  The collapse is
    asserted on every run by evaluating the representative correction factor
    ``1 - smooth(pi_hat / pi_hat)`` and insisting it is below 1e-10.
    """
    terms, _ = _summands(
        data, nuisances, rule, lambda qv: (qv <= 0.0).astype(float), max_degenerate_share
    )
    v_hat = float(np.mean(terms))

    pi = nuisances.propensity.predict(data.x)
    ratio = pi / pi
    if isinstance(rule.q, ContrastEstimator):
        est = rule.q
        w = est.kernel((est.u[None, :] - est.u[:, None]) / est.h) / est.h
        den = w.sum(axis=1)
        ok = den > 0.0
        smoothed = (w[ok] @ ratio) / den[ok]
        correction = float(np.max(np.abs(1.0 - smoothed))) if smoothed.size else 0.0
    else:
        correction = float(np.max(np.abs(1.0 - ratio)))
    if correction > 1e-10:
        raise EstimationError(
            f"plug-in correction term failed to vanish ({correction:.2e}); "
            "the collapsed variance formula does not apply"
        )
    centered = terms - v_hat
    return float(np.sqrt(np.mean(centered**2)))


# ---------------------------------------------------------------------------
# residual bootstrap band for the contrast curve
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurveBand:
    """Pointwise bootstrap band around the fitted contrast curve."""

    grid: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float


def residual_bootstrap_band(
    data: Dataset,
    nuisances: NuisanceFit,
    rule: TreatmentRule,
    grid,
    b: int = 500,
    level: float = 0.95,
    seed: int = 0,
    max_degenerate_share: float = 0.10,
) -> CurveBand:
    """Pointwise confidence band for the contrast by resampling residuals.

    Residuals ``y - mu_hat - a * q_hat(index)`` are resampled with
    replacement; each draw rebuilds outcomes, refits the outcome model (the
    treatment and covariates are unchanged, so the propensity fit is), and
    re-evaluates the contrast on the grid at the fixed index estimate and
    bandwidth.  Bands are the pointwise empirical quantiles at
    ``(1 - level)/2`` and ``1 - (1 - level)/2``.  Deterministic given
    ``seed``; draw-level streams are derived from ``(seed, draw)`` so results
    do not depend on scheduling.
    """
    if b < 50:
        raise InputError("need at least 50 bootstrap draws")
    if not 0.0 < level < 1.0:
        raise InputError("level must lie in (0, 1)")
    est = rule.q
    if not isinstance(est, ContrastEstimator):
        raise InputError("residual bootstrap needs a fitted contrast estimator")
    grid = np.asarray(grid, dtype=float)

    q_fit, ok = est.evaluate_masked(est.u)
    fitted = est.mu + data.a * np.where(ok, q_fit, 0.0)
    resid = data.y - fitted
    pool = np.flatnonzero(ok)
    if pool.size == 0:
        raise DegenerateWindowError("no evaluable sample points for residuals")

    center, center_ok = est.evaluate_masked(grid)
    curves = np.empty((b, grid.size))
    prop = nuisances.propensity
    basis = nuisances.outcome.basis
    for t in range(b):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(t)]))
        draw = rng.choice(pool, size=data.n, replace=True)
        y_star = fitted + resid[draw]
        y_star[~ok] = data.y[~ok]
        data_star = data.with_outcome(y_star)
        out_star = fit_outcome_gee(data_star, basis)
        est_star = ContrastEstimator(
            data_star, NuisanceFit(prop, out_star), est.beta, est.kernel, est.h
        )
        vals, _ = est_star.evaluate_masked(grid)
        curves[t] = vals

    nan_share = np.mean(np.isnan(curves), axis=0)
    if np.any(nan_share > max_degenerate_share):
        worst = grid[int(np.argmax(nan_share))]
        raise DegenerateWindowError(
            f"grid point {worst:.4g} was degenerate in {np.max(nan_share):.0%} of draws"
        )
    alpha = 1.0 - level
    lower = np.nanquantile(curves, alpha / 2.0, axis=0)
    upper = np.nanquantile(curves, 1.0 - alpha / 2.0, axis=0)
    center = np.where(center_ok, center, np.nan)
    return CurveBand(grid=grid, center=center, lower=lower, upper=upper, level=level)
