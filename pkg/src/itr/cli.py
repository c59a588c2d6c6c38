"""Batch command-line interface.

Subcommands: ``simulate`` (replicate studies of the stock designs), ``fit``
(one observational CSV through the full pipeline) and ``qcurve`` (fit plus a
residual-bootstrap band for the contrast curve).  Exit codes: 0 success,
1 input or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, config_to_dict, load_config, parse_config
from .errors import EstimationError, InputError
from .inference import residual_bootstrap_band
from .pipeline import fit_policy
from .policy import assign
from .simlab import run_study
from .tabular import load_table

__all__ = ["main"]

_F = "{:.17g}".format  # 17 significant digits keeps CSV round trips exact


def _fmt(value) -> str:
    if value is None:
        return ""
    value = float(value)
    if np.isnan(value):
        return "nan"
    return _F(value)


def _resolve_threads(args, cfg: RunConfig) -> int:
    env = os.environ.get("ITR_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise InputError(f"ITR_THREADS must be an integer, got {env!r}") from exc
    if getattr(args, "threads", None):
        return max(1, int(args.threads))
    if cfg.threads:
        return max(1, cfg.threads)
    return os.cpu_count() or 1


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(
            ",".join(cell if isinstance(cell, str) else _fmt(cell) for cell in row)
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if cfg.mode not in (None, "simulate"):
        raise InputError(f"config mode is {cfg.mode!r}, expected 'simulate'")
    if cfg.scenario is None:
        raise InputError("simulate needs a 'scenario' block in the config")
    reps = args.reps if args.reps is not None else cfg.reps
    seed = args.seed if args.seed is not None else cfg.seed
    threads = _resolve_threads(args, cfg)
    out_dir = Path(args.out or cfg.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)

    report = run_study(
        cfg.scenario,
        cfg.case,
        reps,
        seed,
        cfg.settings,
        threads=threads,
        truth_draws=cfg.truth_draws,
    )
    payload = report.to_dict()
    payload["config"] = config_to_dict(cfg)
    _write_json(out_dir / "report.json", payload)
    _write_csv(
        out_dir / "report.csv",
        ["parameter", "true", "estimate", "sd", "sd_hat", "cvg", "mse"],
        [r.as_csv_row() for r in report.rows],
    )
    print(f"wrote {out_dir / 'report.json'} and {out_dir / 'report.csv'}")
    return 0


# ---------------------------------------------------------------------------
# fit / qcurve
# ---------------------------------------------------------------------------


def _real_data_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        # observational defaults: quartic kernel with a small pilot constant
        cfg = parse_config({"kernel": "quartic", "pilot_c": 0.05})
    return cfg


def _run_fit(args, cfg: RunConfig):
    table = load_table(
        args.data,
        treatment=args.treatment,
        outcome=args.outcome,
        covariates=[c.strip() for c in args.covariates.split(",") if c.strip()],
        anchor=args.anchor,
        continuous=(
            [c.strip() for c in args.continuous.split(",") if c.strip()]
            if args.continuous
            else None
        ),
    )
    report = fit_policy(table.data, cfg.settings)
    return table, report


def _policy_payload(table, report, cfg: RunConfig) -> dict:
    names = table.covariates
    params = [
        {
            "name": names[0],
            "estimate": 1.0,
            "sd": 0.0,
            "ci_lo": 1.0,
            "ci_hi": 1.0,
            "anchor": True,
        }
    ]
    for j, name in enumerate(names[1:]):
        params.append(
            {
                "name": name,
                "estimate": float(report.beta[j + 1]),
                "sd": float(report.beta_sd[j]),
                "ci_lo": float(report.beta_ci[j, 0]),
                "ci_hi": float(report.beta_ci[j, 1]),
                "anchor": False,
            }
        )
    roots = [
        {
            "root": ri.root,
            "bias_hat": None if np.isnan(ri.bias_hat) else ri.bias_hat,
            "sd_hat": None if np.isnan(ri.sd_hat) else ri.sd_hat,
        }
        for ri in report.root_inferences
    ]
    v_sd = report.value_sd
    return {
        "parameters": params,
        "roots": roots,
        "value": {
            "v_hat": report.value.v_hat,
            "sigma_hat": report.value.sigma_hat,
            "sd": v_sd,
            "ci_lo": None if v_sd is None else report.value.v_hat - 1.959963984540054 * v_sd,
            "ci_hi": None if v_sd is None else report.value.v_hat + 1.959963984540054 * v_sd,
            "n_dropped": report.value.n_dropped,
        },
        "h_opt": report.h_opt,
        "solver": {
            "iterations": report.solution.iterations,
            "equation_norm": report.solution.equation_norm,
            "converged": report.solution.converged,
        },
        "normalized_columns": table.normalized,
        "config": config_to_dict(cfg),
    }


def _cmd_fit(args) -> int:
    cfg = _real_data_config(args)
    if cfg.mode not in (None, "fit"):
        raise InputError(f"config mode is {cfg.mode!r}, expected 'fit'")
    out_dir = Path(args.out or cfg.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    table, report = _run_fit(args, cfg)

    _write_json(out_dir / "policy.json", _policy_payload(table, report, cfg))

    idx = table.data.x @ report.beta
    q_vals, ok = report.rule.q.evaluate_masked(idx)
    rows = []
    for i in range(table.data.n):
        q_i = q_vals[i] if ok[i] else float("nan")
        rows.append([str(i), idx[i], q_i, str(int(ok[i] and q_vals[i] > 0.0))])
    _write_csv(out_dir / "assignments.csv", ["row_id", "index_value", "q_hat", "assign"], rows)
    _write_csv(
        out_dir / "cv_diagnostics.csv",
        ["h", "cv", "n_skipped"],
        [[h, cv, str(k)] for h, cv, k in report.cv_table],
    )
    print(f"wrote {out_dir / 'policy.json'} and {out_dir / 'assignments.csv'}")
    return 0


def _cmd_qcurve(args) -> int:
    cfg = _real_data_config(args)
    if cfg.mode not in (None, "qcurve"):
        raise InputError(f"config mode is {cfg.mode!r}, expected 'qcurve'")
    out_dir = Path(args.out or cfg.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    bootstrap = args.bootstrap if args.bootstrap is not None else cfg.bootstrap
    level = args.level if args.level is not None else cfg.settings.level
    seed = args.seed if args.seed is not None else cfg.seed

    table, report = _run_fit(args, cfg)
    lo, hi = report.root_set.search_interval
    grid = np.linspace(lo, hi, cfg.grid_points)
    band = residual_bootstrap_band(
        table.data,
        report.nuisances,
        report.rule,
        grid,
        b=bootstrap,
        level=level,
        seed=seed,
    )
    _write_csv(
        out_dir / "qcurve.csv",
        ["t", "q_hat", "lower", "upper"],
        [
            [band.grid[i], band.center[i], band.lower[i], band.upper[i]]
            for i in range(band.grid.size)
        ],
    )
    print(f"wrote {out_dir / 'qcurve.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_data_args(p):
    p.add_argument("--data", required=True, help="input CSV with a header row")
    p.add_argument("--treatment", required=True, help="0/1 treatment column name")
    p.add_argument("--outcome", required=True, help="real outcome column name")
    p.add_argument(
        "--covariates",
        required=True,
        help="comma-separated covariate columns; the first is the anchor unless --anchor is given",
    )
    p.add_argument("--anchor", default=None, help="covariate whose coefficient is fixed to 1")
    p.add_argument(
        "--continuous",
        default=None,
        help="comma-separated columns to standardise (default: every non-0/1 covariate)",
    )
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--threads", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="itr",
        description=(
            "Individualized treatment regimes via multi-robust single-index "
            "kernel estimation: simulation studies, observational fits and "
            "contrast-curve bands."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a replicate study of a stock design")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", default=None)
    p_sim.add_argument("--threads", type=int, default=None)
    p_sim.set_defaults(func=_cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit the policy pipeline to a CSV")
    _add_data_args(p_fit)
    p_fit.set_defaults(func=_cmd_fit)

    p_q = sub.add_parser("qcurve", help="fit plus a bootstrap band for the contrast")
    _add_data_args(p_q)
    p_q.add_argument("--bootstrap", type=int, default=None)
    p_q.add_argument("--level", type=float, default=None)
    p_q.add_argument("--seed", type=int, default=None)
    p_q.set_defaults(func=_cmd_qcurve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EstimationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
