"""Solving the augmented inverse-probability estimating equation for the index.

The equation averages, over the sample, the product of an
augmentation-weighted outcome contrast and the centered free covariates,
with the contrast function and the conditional covariate mean replaced by
kernel plug-ins recomputed at every candidate index vector.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .contrast import ContrastEstimator, anchored_beta, index_values, pilot_bandwidth
from .data import Dataset
from .errors import DegenerateWindowError, EstimationError, RankDeficiencyError
from .kernels import KernelSpec
from .nuisance import NuisanceFit

__all__ = [
    "EstimatingContext",
    "BetaSolution",
    "estimating_equation",
    "solve_index",
    "ols_interaction_init",
    "multi_start_diagnostic",
]

MAX_DEGENERATE_SHARE = 0.05


@dataclass
class EstimatingContext:
    """Everything the estimating function needs besides the index itself.

    ``pilot_h`` is fixed at construction (default rule: ``pilot_c * sd(index)
    * n^{-1/3}`` computed at ``beta_init``), so one solve works with one
    bandwidth throughout.
    """

    data: Dataset
    nuisances: NuisanceFit
    kernel: KernelSpec = field(default_factory=KernelSpec)
    pilot_h: float | None = None
    pilot_c: float = 0.7
    beta_init: np.ndarray | None = None
    max_degenerate_share: float = MAX_DEGENERATE_SHARE

    def __post_init__(self):
        if self.beta_init is None:
            self.beta_init = best_candidate_init(self.data, self.nuisances, self.kernel)
        self.beta_init = np.asarray(self.beta_init, dtype=float).ravel()
        if self.beta_init.size != self.data.d - 1:
            raise EstimationError(
                f"beta_init must have {self.data.d - 1} free components"
            )
        if self.pilot_h is None:
            u0 = index_values(self.data, anchored_beta(self.beta_init))
            self.pilot_h = pilot_bandwidth(u0, self.pilot_c)
        self.pilot_h = float(self.pilot_h)
        if self.pilot_h <= 0.0:
            raise EstimationError("pilot bandwidth must be positive")
        u0 = index_values(self.data, anchored_beta(self.beta_init))
        sd = float(np.std(u0, ddof=1)) or 1.0
        n = self.data.n
        if not n ** (-0.5) <= self.pilot_h / sd <= 10.0 * n ** (-0.125):
            warnings.warn(
                "pilot bandwidth is outside the n^(-1/2)..n^(-1/8) plausibility "
                "range for the index scale; the estimating equation may be "
                "degenerate or oversmoothed",
                stacklevel=2,
            )


def estimating_equation(ctx: EstimatingContext, beta_l) -> np.ndarray:
    """Empirical estimating function at the free index components ``beta_l``.

    Kernel-degenerate sample points are dropped from the average (their count
    must stay at or below ``ctx.max_degenerate_share``).  Returns a vector of
    length ``d - 1``; empty when ``d == 1``.
    """
    g, _ = _equation_with_count(ctx, beta_l)
    return g


def _equation_with_count(ctx, beta_l, nuisances=None, return_se=False):
    beta_l = np.asarray(beta_l, dtype=float).ravel()
    d = ctx.data.d
    if beta_l.size != d - 1:
        raise EstimationError(f"beta_l must have {d - 1} entries, got {beta_l.size}")
    if d == 1:
        return (np.zeros(0), 0, np.zeros(0)) if return_se else (np.zeros(0), 0)
    nuis = nuisances if nuisances is not None else ctx.nuisances
    est = ContrastEstimator(ctx.data, nuis, anchored_beta(beta_l), ctx.kernel, ctx.pilot_h)
    q_vals, q_ok = est.evaluate_masked(est.u)
    e_vals, e_ok = est.cond_mean_xl_masked(est.u)
    keep = q_ok & e_ok
    n_dropped = int(np.count_nonzero(~keep))
    if n_dropped > ctx.max_degenerate_share * ctx.data.n:
        raise DegenerateWindowError(
            f"{n_dropped} of {ctx.data.n} sample points have degenerate kernel "
            f"windows at pilot bandwidth {ctx.pilot_h:.4g}"
        )
    xl = ctx.data.x[:, 1:]
    bracket = est.r + (1.0 - est.wa) * q_vals
    terms = bracket[keep, None] * (xl[keep] - e_vals[keep])
    g = terms.mean(axis=0)
    if not np.all(np.isfinite(g)):
        raise EstimationError("non-finite accumulation in the estimating equation")
    if return_se:
        n_kept = terms.shape[0]
        se = terms.std(axis=0, ddof=1) / np.sqrt(n_kept) if n_kept > 1 else np.zeros(d - 1)
        return g, n_dropped, se
    return g, n_dropped


@dataclass(frozen=True)
class BetaSolution:
    """Converged index estimate plus solver diagnostics.

    ``tolerance`` is the effective acceptance threshold: the configured
    equation tolerance, widened componentwise to ``stat_z`` standard errors
    of the empirical estimating function.  An exact zero of a kernel-sum
    equation need not exist in a finite sample; any equation value within
    sampling precision of zero is statistically indistinguishable from a
    root, so convergence is declared at whichever of the two scales is
    reached first.  ``converged`` always implies
    ``equation_norm <= tolerance``.
    """

    beta: np.ndarray
    equation_norm: float
    iterations: int
    converged: bool
    tolerance: float = 0.0
    n_dropped: int = 0

    @property
    def beta_l(self) -> np.ndarray:
        return self.beta[1:]


def _acceptance(ctx, beta_l, tol, stat_z):
    """Equation norm, acceptance threshold and verdict at one point."""
    g_b, n_dropped, se = _equation_with_count(ctx, beta_l, return_se=True)
    norm_b = float(np.max(np.abs(g_b))) if g_b.size else 0.0
    if g_b.size == 0:
        return 0.0, tol, True, n_dropped
    thresholds = np.maximum(tol, stat_z * se)
    ok = bool(np.all(np.abs(g_b) <= thresholds))
    return norm_b, float(np.max(thresholds)), ok, n_dropped


def _numeric_jacobian(fun, x, f0, rel_step=1e-4):
    p = x.size
    jac = np.empty((f0.size, p))
    for k in range(p):
        step = rel_step * max(1.0, abs(x[k]))
        xk = x.copy()
        xk[k] += step
        jac[:, k] = (fun(xk) - f0) / step
    return jac


def solve_index(
    ctx: EstimatingContext,
    init=None,
    tol: float = 1e-6,
    max_iter: int = 200,
    stat_z: float = 2.0,
) -> BetaSolution:
    """Damped Newton solve of the estimating equation, LM fallback on stall.

    Newton uses a forward-difference Jacobian (relative step 1e-4) and step
    halving, aiming at an exact zero (``tol``).  When the landscape has no
    exact zero the squared equation norm is handed to Levenberg-Marquardt,
    and the best point is accepted if every equation component is within
    ``stat_z`` empirical standard errors of zero (``stat_z=0`` disables the
    statistical widening).  Non-convergence returns the best iterate with
    ``converged=False`` rather than raising.
    """
    d = ctx.data.d
    if d == 1:
        return BetaSolution(np.array([1.0]), 0.0, 0, True, tol)
    x = np.array(ctx.beta_init if init is None else init, dtype=float).ravel()
    if x.size != d - 1:
        raise EstimationError(f"init must have {d - 1} entries")

    def fun(b):
        return _equation_with_count(ctx, b)[0]

    def fun_or_none(b):
        # trial points during line search / differencing may step into
        # degenerate-window territory; treat that as step rejection
        try:
            return fun(b)
        except DegenerateWindowError:
            return None

    def accepted_at(b):
        return _acceptance(ctx, b, tol, stat_z)

    g = fun(x)
    norm = float(np.max(np.abs(g))) if g.size else 0.0
    best_x, best_norm = x.copy(), norm
    iterations = 0
    while norm > tol and iterations < max_iter:
        try:
            jac = _numeric_jacobian(fun, x, g)
        except DegenerateWindowError:
            break
        try:
            delta = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError:
            if jac.size == 0:
                break
            delta, *_ = np.linalg.lstsq(jac, -g, rcond=None)
            if not np.all(np.isfinite(delta)) or np.max(np.abs(delta)) == 0.0:
                raise RankDeficiencyError("estimating-equation Jacobian is singular")
        step_cap = 2.0  # index coefficients move at most this much per iteration
        delta_norm = float(np.max(np.abs(delta)))
        lam = min(1.0, step_cap / delta_norm) if delta_norm > step_cap else 1.0
        accepted = False
        for _ in range(12):
            g_cand = fun_or_none(x + lam * delta)
            if g_cand is not None:
                cand_norm = float(np.max(np.abs(g_cand)))
                if cand_norm < norm:
                    x, g, norm = x + lam * delta, g_cand, cand_norm
                    accepted = True
                    break
            lam *= 0.5
        iterations += 1
        if norm < best_norm:
            best_x, best_norm = x.copy(), norm
        if not accepted:
            break

    if best_norm > tol:
        norm_b, threshold, ok, n_dropped = accepted_at(best_x)
        if not ok and iterations < max_iter:
            # no exact zero in reach: polish the squared norm
            def fun_lm(b):
                g_b = fun_or_none(b)
                if g_b is None:
                    return np.full(d - 1, 1e6)
                return g_b

            res = least_squares(
                fun_lm,
                best_x,
                method="lm",
                xtol=1e-14,
                ftol=1e-14,
                gtol=1e-14,
                max_nfev=60 * (d - 1),
            )
            iterations += 1
            lm_norm = float(np.max(np.abs(res.fun)))
            if lm_norm < best_norm:
                best_x, best_norm = res.x, lm_norm

    norm_f, threshold, ok, n_dropped = accepted_at(best_x)
    return BetaSolution(
        beta=anchored_beta(best_x),
        equation_norm=norm_f,
        iterations=iterations,
        converged=norm_f <= tol or ok,
        tolerance=max(tol, threshold if ok or norm_f > tol else tol),
        n_dropped=n_dropped,
    )


def ols_interaction_init(data: Dataset) -> np.ndarray:
    """Starting point from the treatment-interaction block of a saturated OLS.

    Regresses the outcome on (1, a, x, a*x) and normalises the interaction
    coefficients by the anchor coefficient; falls back to zeros when the
    anchor interaction is numerically flat.
    """
    if data.d == 1:
        return np.zeros(0)
    design = np.hstack(
        [
            np.ones((data.n, 1)),
            data.a[:, None],
            data.x,
            data.a[:, None] * data.x,
        ]
    )
    coef, *_ = np.linalg.lstsq(design, data.y, rcond=None)
    inter = coef[2 + data.d :]
    # the anchor interaction must carry a real share of the signal or the
    # normalised ratio is unstable noise
    if abs(inter[0]) < 0.05 * np.max(np.abs(inter)) or abs(inter[0]) < 1e-8:
        return np.zeros(data.d - 1)
    return inter[1:] / inter[0]


def candidate_inits(data: Dataset):
    """Starting points covering monotone and non-monotone contrast shapes.

    A linear treatment interaction identifies the index direction when the
    contrast is monotone-ish; when it is even (so linear moments vanish),
    the quadratic treatment-interaction coefficient matrix is approximately
    a rank-one form in the index, whose leading eigenvector recovers the
    direction.  Both candidates are anchored; zeros is the last resort.
    """
    if data.d == 1:
        return [np.zeros(0)]
    d = data.d
    cands = [ols_interaction_init(data)]
    iu = np.triu_indices(d)
    quad = data.x[:, iu[0]] * data.x[:, iu[1]]
    # main-effect quadratics must enter too, or a curved control-arm mean
    # leaks into the treatment-interaction block
    design = np.hstack(
        [
            np.ones((data.n, 1)),
            data.a[:, None],
            data.x,
            quad,
            data.a[:, None] * data.x,
            data.a[:, None] * quad,
        ]
    )
    coef, *_ = np.linalg.lstsq(design, data.y, rcond=None)
    n_quad = iu[0].size
    qcoef = coef[2 + 2 * d + n_quad :]
    m = np.zeros((d, d))
    m[iu] = qcoef
    m = 0.5 * (m + m.T)
    eigvals, eigvecs = np.linalg.eigh(m)
    lead = eigvecs[:, int(np.argmax(np.abs(eigvals)))]
    if abs(lead[0]) > 1e-8:
        cands.append(lead[1:] / lead[0])
    cands.append(np.zeros(d - 1))
    # drop near-duplicates, preserving order
    unique = []
    for c in cands:
        c = np.asarray(c, dtype=float)
        if not np.all(np.isfinite(c)) or np.max(np.abs(c), initial=0.0) > 50.0:
            continue
        if all(np.max(np.abs(c - u), initial=0.0) > 1e-3 for u in unique):
            unique.append(c)
    return unique or [np.zeros(d - 1)]


def _loo_fit_score_raw(data, nuisances, kernel, beta_l) -> float:
    if data.d == 1:
        return 0.0
    beta = anchored_beta(beta_l)
    u = index_values(data, beta)
    sd = float(np.std(u, ddof=1)) or 1.0
    h_val = sd * data.n ** (-0.2)
    est = ContrastEstimator(data, nuisances, beta, kernel, h_val)
    loo, mask = est.loo_at_sample_points()
    if np.count_nonzero(mask) < 0.5 * data.n:
        return float("inf")
    resid = est.r[mask] - est.wa[mask] * loo[mask]
    return float(np.mean(resid**2))


def _loo_fit_score(ctx: EstimatingContext, beta_l) -> float:
    """Leave-one-out prediction error of the index fit at a reference
    smoothing bandwidth; ranks competing estimating-equation roots."""
    return _loo_fit_score_raw(ctx.data, ctx.nuisances, ctx.kernel, beta_l)


def best_candidate_init(data: Dataset, nuisances: NuisanceFit, kernel: KernelSpec):
    """The candidate start whose index best predicts the contrast signal.

    The winner also sets the pilot-bandwidth scale, so a junk linear-moment
    init (for instance when the contrast is an even function) cannot poison
    the smoothing window of the whole solve.
    """
    cands = candidate_inits(data)
    if len(cands) == 1:
        return cands[0]
    scores = []
    for c in cands:
        try:
            scores.append(_loo_fit_score_raw(data, nuisances, kernel, c))
        except DegenerateWindowError:
            scores.append(float("inf"))
    return cands[int(np.argmin(scores))]


def solve_index_multistart(
    ctx: EstimatingContext,
    inits=None,
    tol: float = 1e-6,
    max_iter: int = 200,
    stat_z: float = 2.0,
) -> BetaSolution:
    """Solve from several starts and keep the best-validated accepted root.

    The estimating equation can have several roots in small samples; among
    statistically accepted solutions the one with the smallest leave-one-out
    prediction error wins.  When nothing is accepted, the smallest-norm
    iterate is returned with ``converged=False``.
    """
    if inits is None:
        inits = candidate_inits(ctx.data)
    solutions = []
    for init in inits:
        init = np.asarray(init, dtype=float).ravel()
        try:
            norm0, thr0, ok0, nd0 = _acceptance(ctx, init, tol, stat_z)
        except (DegenerateWindowError, RankDeficiencyError):
            continue
        if ok0:
            # the data cannot distinguish this point from a root; iterating
            # further only wanders across the acceptance region
            solutions.append(
                BetaSolution(anchored_beta(init), norm0, 0, True, thr0, nd0)
            )
            continue
        try:
            solutions.append(
                solve_index(ctx, init=init, tol=tol, max_iter=max_iter, stat_z=stat_z)
            )
        except (DegenerateWindowError, RankDeficiencyError):
            continue
    if not solutions:
        raise EstimationError("every solver start failed")
    accepted = [s for s in solutions if s.converged]
    if not accepted:
        return min(solutions, key=lambda s: s.equation_norm)
    if len(accepted) == 1:
        return accepted[0]
    scores = []
    for s in accepted:
        try:
            scores.append(_loo_fit_score(ctx, s.beta_l))
        except DegenerateWindowError:
            scores.append(float("inf"))
    return accepted[int(np.argmin(scores))]


def multi_start_diagnostic(
    ctx: EstimatingContext,
    n_starts: int = 5,
    spread: float = 0.25,
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 200,
):
    """Re-solve from several perturbed starts to surface root multiplicity.

    Returns the solutions sorted by equation norm.  The estimating equation
    can have several zeros in small samples; this diagnostic reports what the
    configured solver finds from each start without adjudicating between them.
    """
    rng = np.random.default_rng(seed)
    starts = [ctx.beta_init]
    for _ in range(max(0, n_starts - 1)):
        starts.append(ctx.beta_init + spread * rng.standard_normal(ctx.data.d - 1))
    sols = []
    for s in starts:
        try:
            sols.append(solve_index(ctx, init=s, tol=tol, max_iter=max_iter))
        except (DegenerateWindowError, RankDeficiencyError):
            continue
    if not sols:
        raise EstimationError("every diagnostic start failed")
    return sorted(sols, key=lambda s: s.equation_norm)
