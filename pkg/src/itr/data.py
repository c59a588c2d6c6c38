"""Observational sample container: covariates, binary treatment, outcome."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

__all__ = ["Dataset"]


def _readonly(arr):
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """Immutable table of (x, a, y) rows.

    ``x`` is ``n x d``, ``a`` is a 0/1 treatment indicator and ``y`` the
    observed outcome.  Validation enforces finiteness, the binary coding and
    the presence of both treatment arms.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = _readonly(np.atleast_2d(self.x))
        a = _readonly(self.a).ravel()
        y = _readonly(self.y).ravel()
        if x.ndim != 2:
            raise InputError("x must be a 2-d array")
        n = x.shape[0]
        if a.shape[0] != n or y.shape[0] != n:
            raise InputError(
                f"length mismatch: x has {n} rows, a has {a.shape[0]}, y has {y.shape[0]}"
            )
        for name, arr in (("x", x), ("a", a), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise InputError(f"non-finite entries in {name}")
        if not np.all((a == 0.0) | (a == 1.0)):
            raise InputError("treatment indicator must be coded 0/1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n_control(self) -> int:
        return int(self.n - self.a.sum())

    def subset(self, idx) -> "Dataset":
        """Row-subset copy (used by leave-one-out checks and the bootstrap)."""
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.a[idx], self.y[idx])

    def with_outcome(self, y_new) -> "Dataset":
        """Same rows with a replacement outcome vector (residual bootstrap)."""
        return Dataset(self.x, self.a, y_new)
