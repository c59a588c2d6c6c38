"""Working nuisance models: the propensity fit and the control-arm outcome fit.

The propensity model is estimated by Bernoulli maximum likelihood (closed form
for the intercept-only model, damped Newton for the logistic model).  The
outcome model for the non-treated arm solves an estimating equation whose
default weight is the basis vector itself, which reduces to least squares for
any basis that is linear in the coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logit

from .data import Dataset
from .errors import (
    InputError,
    NonConvergenceError,
    RankDeficiencyError,
    SeparationError,
)

__all__ = [
    "OutcomeBasis",
    "OutcomeModel",
    "PropensityModel",
    "NuisanceFit",
    "fit_propensity",
    "fixed_propensity",
    "predict_propensity",
    "fit_outcome_gee",
    "predict_outcome",
]

DEFAULT_CLIP_FLOOR = 1e-3
_COEF_DIVERGENCE_LIMIT = 1e3


# ---------------------------------------------------------------------------
# propensity
# ---------------------------------------------------------------------------


@dataclass
class PropensityModel:
    """Fitted treatment-probability model.

    ``form`` is ``"constant"`` (single logit-scale parameter) or
    ``"logistic_linear"``.  Predictions are clipped into
    ``[clip_floor, 1 - clip_floor]`` because downstream weights divide by both
    ``pi`` and ``1 - pi``; ``clip_events`` counts how often the clip bound was
    actually hit.  ``estimated`` is False for externally fixed probabilities
    (for instance a deliberately misspecified constant), in which case the
    model contributes no estimation variability.
    """

    form: str
    gamma: np.ndarray
    include_intercept: bool = True
    clip_floor: float = DEFAULT_CLIP_FLOOR
    estimated: bool = True
    clip_events: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.form not in ("constant", "logistic_linear"):
            raise InputError(f"unknown propensity form {self.form!r}")
        if not 0.0 < self.clip_floor < 0.5:
            raise InputError("clip_floor must lie in (0, 0.5)")
        self.gamma = np.asarray(self.gamma, dtype=float).ravel()

    def design(self, x) -> np.ndarray:
        """Model design matrix (n, len(gamma)) on the logit scale."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.form == "constant":
            return np.ones((x.shape[0], 1))
        cols = [np.ones((x.shape[0], 1))] if self.include_intercept else []
        cols.append(x)
        design = np.hstack(cols)
        if design.shape[1] != self.gamma.size:
            raise InputError(
                f"covariate dimension mismatch: design has {design.shape[1]} "
                f"columns, gamma has {self.gamma.size}"
            )
        return design

    def raw_prob(self, x) -> np.ndarray:
        """Unclipped model probabilities (used for scores and information)."""
        return expit(self.design(x) @ self.gamma)

    def predict(self, x) -> np.ndarray:
        p = self.raw_prob(x)
        lo, hi = self.clip_floor, 1.0 - self.clip_floor
        n_clipped = int(np.count_nonzero((p < lo) | (p > hi)))
        if n_clipped:
            self.clip_events += n_clipped
        return np.clip(p, lo, hi)

    def score_rows(self, data: Dataset) -> np.ndarray:
        """Per-observation log-likelihood scores, (n, len(gamma))."""
        design = self.design(data.x)
        p = self.raw_prob(data.x)
        return (data.a - p)[:, None] * design

    def information(self, data: Dataset) -> np.ndarray:
        """Average observed information, ``n^{-1} sum p(1-p) d d^T``."""
        design = self.design(data.x)
        p = self.raw_prob(data.x)
        return (design * (p * (1.0 - p))[:, None]).T @ design / data.n


def fit_propensity(
    data: Dataset,
    form: str = "logistic_linear",
    include_intercept: bool = True,
    clip_floor: float = DEFAULT_CLIP_FLOOR,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> PropensityModel:
    """Maximum-likelihood fit of the treatment-probability model.

    The intercept-only fit is closed form.  The logistic fit runs damped
    Newton with step halving; coefficients running past 1e3 are treated as
    evidence of separation (unbounded likelihood) and raise explicitly.
    """
    n_treated = int(data.a.sum())
    if n_treated == 0 or n_treated == data.n:
        raise InputError("need both treatment arms to fit a propensity model")
    if form == "constant":
        p_bar = float(np.mean(data.a))
        return PropensityModel("constant", np.array([logit(p_bar)]), True, clip_floor)
    if form != "logistic_linear":
        raise InputError(f"unknown propensity form {form!r}")

    probe = PropensityModel(
        "logistic_linear",
        np.zeros(data.d + (1 if include_intercept else 0)),
        include_intercept,
        clip_floor,
    )
    design = probe.design(data.x)
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankDeficiencyError("propensity design matrix is rank deficient")

    gamma = np.zeros(design.shape[1])
    a = data.a

    def loglik(g):
        eta = design @ g
        # log pi^a (1-pi)^(1-a) = a*eta - log(1+exp(eta)), stable form
        return float(np.sum(a * eta - np.logaddexp(0.0, eta)))

    ll = loglik(gamma)
    for _ in range(max_iter):
        p = expit(design @ gamma)
        score = design.T @ (a - p)
        if np.max(np.abs(score)) <= tol * data.n:
            break
        w = p * (1.0 - p)
        hess = (design * w[:, None]).T @ design
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError("singular Hessian in logistic fit") from exc
        lam = 1.0
        for _ in range(30):
            cand = gamma + lam * step
            ll_cand = loglik(cand)
            if ll_cand > ll:
                gamma, ll = cand, ll_cand
                break
            lam *= 0.5
        else:
            break
        if np.max(np.abs(gamma)) > _COEF_DIVERGENCE_LIMIT:
            raise SeparationError(
                "logistic coefficients diverged; the arms appear separated"
            )
    p = expit(design @ gamma)
    # a separated fit drives every fitted probability onto its own label,
    # zeroing the score at divergent coefficients
    saturated = np.where(a == 1.0, p > 1.0 - 1e-6, p < 1e-6)
    if np.all(saturated):
        raise SeparationError(
            "likelihood is unbounded; the arms are perfectly separated"
        )
    score = design.T @ (a - p) / data.n
    if np.max(np.abs(score)) > 1e-8:
        raise NonConvergenceError(
            f"propensity score equation not solved (sup-norm {np.max(np.abs(score)):.2e})"
        )
    return PropensityModel("logistic_linear", gamma, include_intercept, clip_floor)


def fixed_propensity(value: float, clip_floor: float = DEFAULT_CLIP_FLOOR) -> PropensityModel:
    """A constant treatment probability imposed rather than estimated."""
    if not 0.0 < value < 1.0:
        raise InputError("fixed propensity must lie in (0, 1)")
    return PropensityModel(
        "constant", np.array([logit(value)]), True, clip_floor, estimated=False
    )


def predict_propensity(model: PropensityModel, x) -> np.ndarray:
    """Clipped treatment probabilities for covariate rows ``x``."""
    return model.predict(x)


# ---------------------------------------------------------------------------
# outcome model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OutcomeBasis:
    """Basis functions for the control-arm mean model, linear in coefficients.

    ``kind`` is ``"constant"``, ``"linear"`` (intercept plus every covariate)
    or ``"custom"`` with an explicit term list.  Custom terms:

    - ``{"type": "power", "exponents": [e1, ..., ed]}`` -> ``prod_k x_k^{e_k}``
    - ``{"type": "sin", "weights": [w1, ..., wd]}``     -> ``sin(w^T x)``
    - ``{"type": "quad", "weights": [w1, ..., wd]}``    -> ``(w^T x)^2``

    The sin/quad terms let a study pose working models whose span contains a
    sinusoidal-plus-quadratic truth while the coefficient vector stays linear.
    """

    kind: str = "linear"
    terms: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "custom"):
            raise InputError(f"unknown outcome basis kind {self.kind!r}")
        if self.kind == "custom" and not self.terms:
            raise InputError("custom outcome basis needs a nonempty term list")
        object.__setattr__(self, "terms", tuple(dict(t) for t in self.terms))

    def n_params(self, d: int) -> int:
        if self.kind == "constant":
            return 1
        if self.kind == "linear":
            return d + 1
        return len(self.terms)

    def design(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        if self.kind == "constant":
            return np.ones((n, 1))
        if self.kind == "linear":
            return np.hstack([np.ones((n, 1)), x])
        cols = []
        for term in self.terms:
            kind = term.get("type")
            if kind == "power":
                expo = np.asarray(term["exponents"], dtype=float)
                if expo.size != d:
                    raise InputError("power-term exponent length must equal d")
                cols.append(np.prod(x**expo, axis=1))
            elif kind == "sin":
                w = np.asarray(term["weights"], dtype=float)
                cols.append(np.sin(x @ w))
            elif kind == "quad":
                w = np.asarray(term["weights"], dtype=float)
                cols.append((x @ w) ** 2)
            else:
                raise InputError(f"unknown outcome basis term type {kind!r}")
        return np.column_stack(cols)


@dataclass(frozen=True)
class OutcomeModel:
    """Fitted control-arm mean model ``mu(x) = alpha^T basis(x)``."""

    basis: OutcomeBasis
    alpha: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float).ravel())

    def predict(self, x) -> np.ndarray:
        design = self.basis.design(x)
        if design.shape[1] != self.alpha.size:
            raise InputError(
                f"basis produces {design.shape[1]} columns but alpha has "
                f"{self.alpha.size} entries"
            )
        return design @ self.alpha


def fit_outcome_gee(
    data: Dataset,
    basis: OutcomeBasis = OutcomeBasis("linear"),
    weight_spec: str = "basis",
) -> OutcomeModel:
    """Solve the control-arm estimating equation for the mean-model coefficients.

    With the default basis weights the equation is the normal equation of
    least squares.  A callable ``weight_spec(x_controls) -> (n0, p)`` supplies
    alternative weights.  Raises on an empty control arm or a rank-deficient
    cross matrix.
    """
    controls = data.a == 0.0
    n0 = int(np.count_nonzero(controls))
    if n0 == 0:
        raise InputError("control arm is empty")
    xc = data.x[controls]
    yc = data.y[controls]
    design = basis.design(xc)
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankDeficiencyError("outcome basis is rank deficient on the controls")
    if weight_spec == "basis":
        weights = design
    elif callable(weight_spec):
        weights = np.atleast_2d(np.asarray(weight_spec(xc), dtype=float))
    else:
        raise InputError("weight_spec must be 'basis' or a callable")
    cross = weights.T @ design
    try:
        alpha = np.linalg.solve(cross, weights.T @ yc)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("singular weight/design cross matrix") from exc
    resid_eq = weights.T @ (yc - design @ alpha)
    scale = max(1.0, float(np.max(np.abs(weights.T @ yc))) if yc.size else 1.0)
    if np.max(np.abs(resid_eq)) > 1e-8 * scale:
        raise NonConvergenceError(
            f"outcome estimating equation not solved (sup-norm {np.max(np.abs(resid_eq)):.2e})"
        )
    return OutcomeModel(basis, alpha)


def predict_outcome(model: OutcomeModel, x) -> np.ndarray:
    """Evaluate the fitted control-arm mean at covariate rows ``x``."""
    return model.predict(x)


class NuisanceFit(NamedTuple):
    """The pair of fitted working models the rest of the pipeline consumes."""

    propensity: PropensityModel
    outcome: OutcomeModel
