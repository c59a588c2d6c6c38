"""Univariate smoothing kernels, scaled kernel weights and a plug-in KDE.

Every nonparametric piece of the pipeline (contrast-function smoothing,
conditional-mean smoothing, density plug-ins for inference) funnels through
the three operations here, so they are kept pure and vectorised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["KernelSpec", "kernel_eval", "scaled_weights", "kde", "KERNEL_FAMILIES"]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _epanechnikov(u):
    out = 0.75 * (1.0 - u * u)
    return np.where(np.abs(u) <= 1.0, out, 0.0)


def _quartic(u):
    t = 1.0 - u * u
    out = (15.0 / 16.0) * t * t
    return np.where(np.abs(u) <= 1.0, out, 0.0)


def _gaussian(u):
    return np.exp(-0.5 * u * u) / _SQRT_2PI


# family -> (evaluator, support half-width, int z^2 K(z) dz, int K(z)^2 dz)
KERNEL_FAMILIES = {
    "epanechnikov": (_epanechnikov, 1.0, 1.0 / 5.0, 3.0 / 5.0),
    "quartic": (_quartic, 1.0, 1.0 / 7.0, 5.0 / 7.0),
    "gaussian": (_gaussian, math.inf, 1.0, 1.0 / (2.0 * math.sqrt(math.pi))),
}


@dataclass(frozen=True)
class KernelSpec:
    """A symmetric probability-density kernel selected by family name.

    The compact families (``epanechnikov``, ``quartic``) vanish identically
    for ``|u| > 1``.  The gaussian family is offered as a smooth fallback even
    though it has unbounded support; rate-sensitive checks stick to the
    compact families.
    """

    family: str = "epanechnikov"

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(
                f"unknown kernel family {self.family!r}; "
                f"choose one of {sorted(KERNEL_FAMILIES)}"
            )

    def __call__(self, u):
        return KERNEL_FAMILIES[self.family][0](np.asarray(u, dtype=float))

    @property
    def support(self) -> float:
        """Half-width of the support (``inf`` for gaussian)."""
        return KERNEL_FAMILIES[self.family][1]

    @property
    def second_moment(self) -> float:
        """``int z^2 K(z) dz``, the curvature constant in bias formulas."""
        return KERNEL_FAMILIES[self.family][2]

    @property
    def l2_norm_sq(self) -> float:
        """``int K(z)^2 dz``, the variance constant in plug-in formulas."""
        return KERNEL_FAMILIES[self.family][3]


def _require_bandwidth(h):
    h = float(h)
    if not (h > 0.0) or not math.isfinite(h):
        raise ValueError(f"bandwidth must be a positive finite real, got {h!r}")
    return h


def kernel_eval(spec: KernelSpec, u):
    """Evaluate ``K(u)``; total on finite inputs, zero outside compact support."""
    return spec(u)


def scaled_weights(spec: KernelSpec, h, centers, point):
    """Scaled kernel weights ``K((centers_j - point) / h) / h``.

    Nonnegative by construction; rejects a nonpositive bandwidth.
    """
    h = _require_bandwidth(h)
    centers = np.asarray(centers, dtype=float)
    return spec((centers - point) / h) / h


def kde(spec: KernelSpec, h, sample, point):
    """Kernel density estimate ``n^{-1} sum_j K_h(sample_j - point)``."""
    sample = np.asarray(sample, dtype=float)
    if sample.size == 0:
        raise ValueError("kde requires a nonempty sample")
    return float(np.mean(scaled_weights(spec, h, sample, point)))
