"""Kernel estimation of the treatment-difference (contrast) function.

The contrast function is smoothed against the scalar index ``beta^T x`` with
inverse-probability-weighted local averages.  The same machinery provides the
conditional covariate mean used by the index estimating equation, leave-one-out
evaluation, and the cross-validated bandwidth rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import DegenerateWindowError, InputError
from .kernels import KernelSpec
from .nuisance import NuisanceFit

__all__ = [
    "ContrastEstimator",
    "CVResult",
    "anchored_beta",
    "index_values",
    "pilot_bandwidth",
    "default_cv_grid",
    "cv_bandwidth",
    "cond_mean_xl",
]

DEGENERACY_FLOOR_PER_OBS = 1e-8
_CHUNK_ELEMENTS = 50_000_000


def anchored_beta(beta_l) -> np.ndarray:
    """Full index vector ``(1, beta_l)`` with the identifiability anchor."""
    beta_l = np.asarray(beta_l, dtype=float).ravel()
    return np.concatenate([[1.0], beta_l])


def index_values(data: Dataset, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.size != data.d:
        raise InputError(f"beta has {beta.size} entries, data has {data.d} covariates")
    if beta[0] != 1.0:
        raise InputError("index vector must have first component exactly 1")
    return data.x @ beta


def pilot_bandwidth(index: np.ndarray, c: float) -> float:
    """Index-estimation bandwidth ``c * sd(index) * n^{-1/3}``."""
    n = index.size
    sd = float(np.std(index, ddof=1)) if n > 1 else 1.0
    if sd <= 0.0:
        sd = 1.0
    return float(c) * sd * n ** (-1.0 / 3.0)


def default_cv_grid(index: np.ndarray, lo: float = 0.2, hi: float = 3.0, size: int = 20):
    """Log-spaced candidate bandwidths ``[lo, hi] * sd(index) * n^{-1/5}``."""
    n = index.size
    sd = float(np.std(index, ddof=1)) if n > 1 else 1.0
    if sd <= 0.0:
        sd = 1.0
    scale = sd * n ** (-1.0 / 5.0)
    return np.geomspace(lo * scale, hi * scale, size)


def _weight_matrix(kernel: KernelSpec, h: float, centers: np.ndarray, points: np.ndarray):
    """Rows indexed by evaluation point, columns by observation: K_h(u_i - t)."""
    return kernel((centers[None, :] - points[:, None]) / h) / h


class ContrastEstimator:
    """Evaluatable kernel estimate of the treatment-difference function.

    Binds a dataset, fitted nuisances, an anchored index vector, a kernel and
    a bandwidth.  ``evaluate`` raises on query points whose local
    treated-arm mass falls below the degeneracy floor ``1e-8 * n``; the
    ``*_masked`` variants instead flag such points so callers can drop and
    report them.
    """

    def __init__(
        self,
        data: Dataset,
        nuisances: NuisanceFit,
        beta,
        kernel: KernelSpec,
        h,
        floor: float | None = None,
    ):
        h = float(h)
        if h <= 0.0:
            raise InputError("bandwidth must be positive")
        self.data = data
        self.nuisances = nuisances
        self.beta = np.asarray(beta, dtype=float).ravel()
        self.kernel = kernel
        self.h = h
        self.u = index_values(data, self.beta)
        self.pi = nuisances.propensity.predict(data.x)
        self.mu = nuisances.outcome.predict(data.x)
        # residual contrast weight and treated inverse-probability weight
        self.r = (data.a - self.pi) * (data.y - self.mu) / (self.pi * (1.0 - self.pi))
        self.wa = data.a / self.pi
        # a usable window must hold at least the mass of one centrally placed
        # observation; windows above the per-observation floor but below this
        # carry only marginal edge mass and their ratios are unbounded
        if floor is None:
            floor = max(
                DEGENERACY_FLOOR_PER_OBS * data.n, float(kernel(0.0)) / h
            )
        self.floor = float(floor)

    # -- raw kernel sums ----------------------------------------------------

    def _sums(self, points: np.ndarray):
        """(num, den) of the contrast ratio at each point, chunked over points."""
        n = self.u.size
        m = points.size
        num = np.empty(m)
        den = np.empty(m)
        step = max(1, _CHUNK_ELEMENTS // max(n, 1))
        for start in range(0, m, step):
            sl = slice(start, min(start + step, m))
            w = _weight_matrix(self.kernel, self.h, self.u, points[sl])
            num[sl] = w @ self.r
            den[sl] = w @ self.wa
        return num, den

    # -- public evaluation ---------------------------------------------------

    def evaluate_masked(self, points):
        """Contrast values with a validity mask (False where degenerate)."""
        points = np.atleast_1d(np.asarray(points, dtype=float))
        num, den = self._sums(points)
        mask = den >= self.floor
        vals = np.full(points.shape, np.nan)
        vals[mask] = num[mask] / den[mask]
        return vals, mask

    def evaluate(self, points):
        """Contrast values; raises ``DegenerateWindowError`` listing bad points."""
        points = np.asarray(points, dtype=float)
        scalar = points.ndim == 0
        vals, mask = self.evaluate_masked(points)
        if not np.all(mask):
            bad = np.atleast_1d(points)[~mask]
            raise DegenerateWindowError(
                f"no treated kernel mass near {bad[:5].tolist()}", points=bad
            )
        return float(vals[0]) if scalar else vals

    def __call__(self, points):
        return self.evaluate(points)

    def evaluate_loo(self, j: int, points):
        """Contrast with observation ``j`` removed from both kernel sums."""
        points = np.asarray(points, dtype=float)
        scalar = points.ndim == 0
        pts = np.atleast_1d(points)
        num, den = self._sums(pts)
        w_j = self.kernel((self.u[j] - pts) / self.h) / self.h
        num = num - w_j * self.r[j]
        den = den - w_j * self.wa[j]
        if np.any(den < self.floor):
            bad = pts[den < self.floor]
            raise DegenerateWindowError(
                f"leave-one-out window degenerate near {bad[:5].tolist()}", points=bad
            )
        vals = num / den
        return float(vals[0]) if scalar else vals

    def loo_at_sample_points(self):
        """All ``Q_loo(u_j)`` at once via diagonal removal; returns (vals, mask)."""
        num, den = self._sums(self.u)
        w_self = self.kernel(np.zeros_like(self.u)) / self.h
        num = num - w_self * self.r
        den = den - w_self * self.wa
        mask = den >= self.floor
        vals = np.full(self.u.shape, np.nan)
        vals[mask] = num[mask] / den[mask]
        return vals, mask

    # -- conditional covariate mean ------------------------------------------

    def cond_mean_xl_masked(self, points):
        """Local average of the free covariates against the index, with mask."""
        points = np.atleast_1d(np.asarray(points, dtype=float))
        xl = self.data.x[:, 1:]
        n = self.u.size
        m = points.size
        out = np.full((m, xl.shape[1]), np.nan)
        den = np.empty(m)
        step = max(1, _CHUNK_ELEMENTS // max(n, 1))
        for start in range(0, m, step):
            sl = slice(start, min(start + step, m))
            w = _weight_matrix(self.kernel, self.h, self.u, points[sl])
            d = w.sum(axis=1)
            den[sl] = d
            ok = d >= self.floor
            block = np.full((d.size, xl.shape[1]), np.nan)
            block[ok] = (w[ok] @ xl) / d[ok, None]
            out[sl] = block
        return out, den >= self.floor

    def cond_mean_xl(self, points):
        points = np.asarray(points, dtype=float)
        scalar = points.ndim == 0
        vals, mask = self.cond_mean_xl_masked(points)
        if not np.all(mask):
            bad = np.atleast_1d(points)[~mask]
            raise DegenerateWindowError(
                f"empty kernel window near {bad[:5].tolist()}", points=bad
            )
        return vals[0] if scalar else vals


def cond_mean_xl(data: Dataset, beta, kernel: KernelSpec, h, points):
    """Componentwise local average of the free covariates at index ``points``.

    Stand-alone form that needs no nuisance fit; each output component lies in
    the convex hull of the corresponding covariate column because the kernel
    weights are nonnegative.
    """
    h = float(h)
    if h <= 0.0:
        raise InputError("bandwidth must be positive")
    beta = np.asarray(beta, dtype=float).ravel()
    u = index_values(data, beta)
    points_arr = np.atleast_1d(np.asarray(points, dtype=float))
    w = _weight_matrix(kernel, h, u, points_arr)
    den = w.sum(axis=1)
    floor = max(DEGENERACY_FLOOR_PER_OBS * data.n, float(kernel(0.0)) / h)
    if np.any(den < floor):
        bad = points_arr[den < floor]
        raise DegenerateWindowError(f"empty kernel window near {bad[:5].tolist()}", points=bad)
    vals = (w @ data.x[:, 1:]) / den[:, None]
    return vals[0] if np.asarray(points).ndim == 0 else vals


# ---------------------------------------------------------------------------
# leave-one-out cross-validation for the smoothing bandwidth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CVResult:
    """Selected bandwidth plus the full diagnostics table.

    ``table`` rows are ``(h, cv, n_skipped)`` in ascending ``h`` order;
    invalid bandwidths (more than 10% of observations skipped) carry
    ``cv = nan`` and never win the argmin.
    """

    h_opt: float
    table: tuple

    def as_rows(self):
        return [(float(h), float(cv), int(k)) for h, cv, k in self.table]


def cv_bandwidth(
    data: Dataset,
    nuisances: NuisanceFit,
    beta,
    kernel: KernelSpec,
    grid,
    min_valid_share: float = 0.9,
) -> CVResult:
    """Pick the bandwidth minimising leave-one-out prediction error.

    The per-observation target is the inverse-probability residual contrast;
    the prediction is the treated-weighted leave-one-out contrast value at the
    observation's own index point.  Skipped (degenerate) points are excluded
    from the average and counted; a bandwidth where fewer than
    ``min_valid_share`` of observations survive is discarded.  Ties break
    toward the smaller bandwidth.
    """
    grid = np.sort(np.atleast_1d(np.asarray(grid, dtype=float)))
    if grid.size == 0:
        raise InputError("bandwidth grid is empty")
    if np.any(grid <= 0.0):
        raise InputError("bandwidth grid entries must be positive")
    rows = []
    scores = np.full(grid.size, np.inf)
    for k, h in enumerate(grid):
        est = ContrastEstimator(data, nuisances, beta, kernel, h)
        loo, mask = est.loo_at_sample_points()
        n_skipped = int(np.count_nonzero(~mask))
        if data.n - n_skipped < min_valid_share * data.n:
            rows.append((float(h), float("nan"), n_skipped))
            continue
        resid = est.r[mask] - est.wa[mask] * loo[mask]
        cv = float(np.mean(resid**2))
        rows.append((float(h), cv, n_skipped))
        scores[k] = cv
    if not np.any(np.isfinite(scores)):
        raise DegenerateWindowError("every candidate bandwidth is degenerate")
    return CVResult(h_opt=float(grid[int(np.argmin(scores))]), table=tuple(rows))
