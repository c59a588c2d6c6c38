"""Treatment assignment, value estimation and decision-boundary roots.

The rule treats exactly when the estimated contrast at the individual's index
is strictly positive.  The value of the rule is estimated by augmented
inverse-probability weighting; a sinusoidal ramp replacing the indicator makes
the same estimator differentiable for asymptotic arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .contrast import ContrastEstimator
from .data import Dataset
from .errors import DegenerateWindowError, InputError
from .nuisance import NuisanceFit

__all__ = [
    "TreatmentRule",
    "ValueEstimate",
    "RootSet",
    "assign",
    "value_estimate",
    "smoothed_value",
    "indicator_ramp",
    "find_roots",
    "default_root_interval",
]


@dataclass(frozen=True)
class TreatmentRule:
    """Assigns treatment 1 iff the contrast at the index is strictly positive.

    ``q`` may be a fitted ``ContrastEstimator`` or any callable on index
    values; ties at exactly zero assign control.
    """

    beta: np.ndarray
    q: object

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())

    def q_values(self, index_points):
        if isinstance(self.q, ContrastEstimator):
            return self.q.evaluate(index_points)
        return np.asarray(self.q(np.asarray(index_points, dtype=float)), dtype=float)

    def index_of(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.beta.size:
            raise InputError(
                f"x has {x.shape[1]} covariates, rule expects {self.beta.size}"
            )
        return x @ self.beta


def assign(rule: TreatmentRule, x):
    """0/1 assignment for one covariate row or a batch of rows."""
    single = np.asarray(x).ndim == 1
    idx = rule.index_of(x)
    out = (np.atleast_1d(rule.q_values(idx)) > 0.0).astype(int)
    return int(out[0]) if single else out


@dataclass
class ValueEstimate:
    """Estimated mean outcome under the rule; ``sigma_hat`` is filled by inference."""

    v_hat: float
    sigma_hat: float | None
    n: int
    n_dropped: int = 0


def _rule_q_masked(data, rule):
    """Contrast at every sample index, with a validity mask."""
    idx = rule.index_of(data.x)
    if isinstance(rule.q, ContrastEstimator):
        return rule.q.evaluate_masked(idx)
    vals = np.asarray(rule.q(idx), dtype=float)
    return vals, np.isfinite(vals)


def _summands(data, nuisances, rule, weight_of_q, max_degenerate_share):
    qv, ok = _rule_q_masked(data, rule)
    n_dropped = int(np.count_nonzero(~ok))
    if n_dropped > max_degenerate_share * data.n:
        raise DegenerateWindowError(
            f"{n_dropped} of {data.n} sample points have no evaluable contrast"
        )
    pi = nuisances.propensity.predict(data.x)[ok]
    mu = nuisances.outcome.predict(data.x)[ok]
    a = data.a[ok]
    y = data.y[ok]
    q = qv[ok]
    w = weight_of_q(q)
    denom = pi + (1.0 - 2.0 * pi) * w
    ipw = (a + (1.0 - 2.0 * a) * w) * y / denom
    augment = (pi - a) * (mu + q - (2.0 * mu + q) * w) / denom
    return ipw + augment, n_dropped


def value_estimate(
    data: Dataset,
    nuisances: NuisanceFit,
    rule: TreatmentRule,
    max_degenerate_share: float = 0.05,
) -> ValueEstimate:
    """Augmented inverse-probability estimate of the rule's expected outcome.

    Sample points whose contrast is not evaluable are dropped (with a count);
    more than ``max_degenerate_share`` of them is an error.
    """
    terms, n_dropped = _summands(
        data, nuisances, rule, lambda q: (q <= 0.0).astype(float), max_degenerate_share
    )
    return ValueEstimate(
        v_hat=float(np.mean(terms)),
        sigma_hat=None,
        n=data.n,
        n_dropped=n_dropped,
    )


def indicator_ramp(t, a: float):
    """Differentiable stand-in for ``I(t <= 0)``:

    1 for ``t <= -a``, 0 for ``t >= a``, ``(1 + sin(-pi t / (2a))) / 2``
    in between.
    """
    if a <= 0.0:
        raise InputError("ramp half-width must be positive")
    t = np.asarray(t, dtype=float)
    mid = 0.5 * (1.0 + np.sin(-math.pi * t / (2.0 * a)))
    return np.where(t <= -a, 1.0, np.where(t >= a, 0.0, mid))


def smoothed_value(
    data: Dataset,
    nuisances: NuisanceFit,
    rule: TreatmentRule,
    a: float,
    max_degenerate_share: float = 0.05,
) -> float:
    """Value estimate with the control indicator replaced by the smooth ramp."""
    terms, _ = _summands(
        data, nuisances, rule, lambda q: indicator_ramp(q, a), max_degenerate_share
    )
    return float(np.mean(terms))


# ---------------------------------------------------------------------------
# decision-boundary roots
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RootSet:
    """Sorted zero crossings of the contrast over a search interval."""

    roots: np.ndarray
    search_interval: tuple
    grid_step: float

    def __post_init__(self):
        object.__setattr__(self, "roots", np.asarray(self.roots, dtype=float))


def default_root_interval(index: np.ndarray, lo_q: float = 0.025, hi_q: float = 0.975):
    """Central quantile range of the index, where the density support holds."""
    return float(np.quantile(index, lo_q)), float(np.quantile(index, hi_q))


def find_roots(
    q,
    interval,
    grid_step: float | None = None,
    tol: float = 1e-6,
    max_degenerate_share: float = 0.10,
) -> RootSet:
    """Grid scan for sign changes of the contrast, refined by bisection.

    ``q`` is a fitted ``ContrastEstimator`` or a plain callable.  Grid points
    with degenerate windows are skipped (more than ``max_degenerate_share`` of
    them is an error).  Each bracket is bisected until ``|q| <= tol`` or the
    bracket width falls below 1e-10.
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not hi > lo:
        raise InputError("search interval must have positive length")
    if grid_step is None:
        grid_step = (hi - lo) / 400.0
    if grid_step <= 0.0:
        raise InputError("grid step must be positive")
    n_steps = max(2, int(math.ceil((hi - lo) / grid_step)) + 1)
    grid = np.linspace(lo, hi, n_steps)

    if isinstance(q, ContrastEstimator):
        vals, ok = q.evaluate_masked(grid)

        def q_at(t):
            return q.evaluate(np.array([t]))[0]

    else:
        vals = np.asarray(q(grid), dtype=float)
        ok = np.isfinite(vals)

        def q_at(t):
            return float(q(np.array([t]))[0])

    n_bad = int(np.count_nonzero(~ok))
    if n_bad > max_degenerate_share * grid.size:
        raise DegenerateWindowError(
            f"{n_bad} of {grid.size} scan points have degenerate windows"
        )

    good = np.flatnonzero(ok)
    roots = []
    for left, right in zip(good[:-1], good[1:]):
        f_left, f_right = vals[left], vals[right]
        if f_left == 0.0:
            roots.append(float(grid[left]))
            continue
        if f_left * f_right > 0.0:
            continue
        a_pt, b_pt = float(grid[left]), float(grid[right])
        f_a = f_left
        for _ in range(200):
            mid = 0.5 * (a_pt + b_pt)
            try:
                f_mid = q_at(mid)
            except DegenerateWindowError:
                break
            if abs(f_mid) <= tol or (b_pt - a_pt) <= 1e-10:
                break
            if f_a * f_mid <= 0.0:
                b_pt = mid
            else:
                a_pt, f_a = mid, f_mid
        roots.append(0.5 * (a_pt + b_pt))
    if ok[good[-1]] and vals[good[-1]] == 0.0:
        roots.append(float(grid[good[-1]]))
    roots = sorted(set(round(r, 12) for r in roots))
    deduped = []
    for r in roots:
        if not deduped or r - deduped[-1] > grid_step * 0.5:
            deduped.append(r)
    return RootSet(np.asarray(deduped), (lo, hi), float(grid_step))
