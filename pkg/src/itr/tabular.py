"""CSV ingestion for observational fits.

Strict by design: the treatment column must be exactly 0/1, missing cells are
rejected with their location rather than imputed, and only covariates flagged
(or detected) as continuous are standardised.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import InputError

__all__ = ["TabularInput", "load_table"]


@dataclass
class TabularInput:
    """A validated, column-selected and optionally standardised design.

    ``covariates`` keeps the user's order with the anchor first; the anchor's
    coefficient is fixed to one downstream, so its scale (and sign) is the
    user's choice.  ``normalized`` records which columns were standardised,
    with the training means/sds kept for reporting.
    """

    data: Dataset
    covariates: list
    treatment: str
    outcome: str
    normalized: dict
    n_rows: int


def _parse_cell(raw, row_idx, col):
    text = raw.strip() if raw is not None else ""
    if text == "":
        raise InputError(f"missing cell at row {row_idx}, column {col!r}")
    try:
        return float(text)
    except ValueError as exc:
        raise InputError(
            f"non-numeric cell {text!r} at row {row_idx}, column {col!r}"
        ) from exc


def load_table(
    path,
    treatment: str,
    outcome: str,
    covariates,
    anchor: str | None = None,
    continuous=None,
) -> TabularInput:
    """Read a CSV with a header row into a model-ready ``TabularInput``.

    ``covariates`` is the ordered selection; ``anchor`` (default: the first
    listed covariate) is moved to the front.  Columns listed in ``continuous``
    are standardised to mean zero and unit sd; when ``continuous`` is None the
    choice is automatic (any covariate not coded entirely 0/1).
    """
    covariates = list(covariates)
    if not covariates:
        raise InputError("need at least one covariate column")
    if anchor is None:
        anchor = covariates[0]
    if anchor not in covariates:
        raise InputError(f"anchor {anchor!r} is not among the covariates")
    ordered = [anchor] + [c for c in covariates if c != anchor]

    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise InputError(f"{path} is empty") from None
            header = [h.strip() for h in header]
            rows = list(reader)
    except OSError as exc:
        raise InputError(f"cannot read data file {path}: {exc}") from exc

    needed = [treatment, outcome, *ordered]
    col_index = {}
    for col in needed:
        if col not in header:
            raise InputError(f"column {col!r} not found in {path} header")
        col_index[col] = header.index(col)

    n = len(rows)
    if n == 0:
        raise InputError(f"{path} has no data rows")
    a = np.empty(n)
    y = np.empty(n)
    x = np.empty((n, len(ordered)))
    for i, row in enumerate(rows):
        row_no = i + 2  # header is line 1
        if len(row) != len(header):
            raise InputError(
                f"row {row_no} has {len(row)} cells, header has {len(header)}"
            )
        a[i] = _parse_cell(row[col_index[treatment]], row_no, treatment)
        y[i] = _parse_cell(row[col_index[outcome]], row_no, outcome)
        for k, col in enumerate(ordered):
            x[i, k] = _parse_cell(row[col_index[col]], row_no, col)

    if not np.all((a == 0.0) | (a == 1.0)):
        bad = int(np.flatnonzero((a != 0.0) & (a != 1.0))[0]) + 2
        raise InputError(
            f"treatment column {treatment!r} must be strictly 0/1 (see row {bad})"
        )

    if continuous is None:
        continuous = [
            col
            for k, col in enumerate(ordered)
            if not np.all((x[:, k] == 0.0) | (x[:, k] == 1.0))
        ]
    normalized = {}
    for col in continuous:
        if col not in ordered:
            raise InputError(f"continuous column {col!r} is not a covariate")
        k = ordered.index(col)
        m = float(np.mean(x[:, k]))
        s = float(np.std(x[:, k], ddof=1))
        if s <= 0.0:
            raise InputError(f"covariate {col!r} is constant; cannot standardise")
        x[:, k] = (x[:, k] - m) / s
        normalized[col] = {"mean": m, "sd": s}

    return TabularInput(
        data=Dataset(x, a, y),
        covariates=ordered,
        treatment=treatment,
        outcome=outcome,
        normalized=normalized,
        n_rows=n,
    )
