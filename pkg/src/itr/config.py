"""Run configuration: strict JSON schema with round-trip fidelity.

Unknown keys are rejected outright so that a typo in a config never silently
falls back to a default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .errors import InputError
from .nuisance import OutcomeBasis
from .pipeline import EstimatorSettings
from .simlab import CASES, Scenario, scenario_by_number

__all__ = ["RunConfig", "load_config", "parse_config", "config_to_dict"]

MODES = ("simulate", "fit", "qcurve")


@dataclass
class RunConfig:
    """Validated batch-run settings; mirrors the JSON schema one to one."""

    mode: str | None = None
    settings: EstimatorSettings = field(default_factory=EstimatorSettings)
    scenario: Scenario | None = None
    case: str = "I"
    reps: int = 200
    seed: int = 0
    bootstrap: int = 500
    threads: int | None = None
    truth_draws: int = 10**6
    grid_points: int = 101
    out: str | None = None


def _take(d: dict, key, default=None):
    return d.pop(key) if key in d else default


def _no_leftovers(d: dict, where: str):
    if d:
        raise InputError(f"unknown config key(s) in {where}: {sorted(d)}")


def _positive(value, name, kind=float):
    try:
        value = kind(value)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{name} must be a number") from exc
    if value <= 0:
        raise InputError(f"{name} must be positive")
    return value


def _parse_outcome(block) -> OutcomeBasis:
    block = dict(block)
    basis = _take(block, "basis", "linear")
    terms = _take(block, "terms", [])
    _no_leftovers(block, "outcome")
    if basis == "custom":
        return OutcomeBasis("custom", tuple(terms))
    if terms:
        raise InputError("outcome.terms only applies to the custom basis")
    return OutcomeBasis(basis)


def _parse_scenario(block) -> Scenario:
    block = dict(block)
    if "number" in block:
        number = _take(block, "number")
        n = _take(block, "n", 500)
        _no_leftovers(block, "scenario")
        return scenario_by_number(int(number), int(_positive(n, "scenario.n", int)))
    kwargs = {}
    for key in ("q0", "mu0", "pi0", "error"):
        if key not in block:
            raise InputError(f"scenario needs either 'number' or the field {key!r}")
        kwargs[key] = _take(block, key)
    kwargs["n"] = int(_positive(_take(block, "n", 500), "scenario.n", int))
    kwargs["d"] = int(_positive(_take(block, "d", 4), "scenario.d", int))
    for key in ("beta0", "alpha0", "alpha10", "alpha20", "gamma0"):
        if key in block:
            kwargs[key] = tuple(float(v) for v in _take(block, key))
    _no_leftovers(block, "scenario")
    return Scenario(**kwargs)


def parse_config(raw: dict) -> RunConfig:
    """Validate a parsed JSON object into a ``RunConfig``."""
    if not isinstance(raw, dict):
        raise InputError("config must be a JSON object")
    raw = dict(raw)

    mode = _take(raw, "mode")
    if mode is not None and mode not in MODES:
        raise InputError(f"mode must be one of {MODES}")

    cv = dict(_take(raw, "cv", {}))
    cv_lo = _positive(_take(cv, "lo", 0.2), "cv.lo")
    cv_hi = _positive(_take(cv, "hi", 3.0), "cv.hi")
    cv_size = int(_positive(_take(cv, "size", 20), "cv.size", int))
    _no_leftovers(cv, "cv")
    if cv_hi <= cv_lo:
        raise InputError("cv.hi must exceed cv.lo")

    solver = dict(_take(raw, "solver", {}))
    solver_tol = _positive(_take(solver, "tol", 1e-6), "solver.tol")
    solver_max_iter = int(_positive(_take(solver, "max_iter", 200), "solver.max_iter", int))
    solver_init = _take(solver, "init", "ols")
    _no_leftovers(solver, "solver")
    if isinstance(solver_init, str):
        if solver_init not in ("ols", "zeros"):
            raise InputError("solver.init must be 'ols', 'zeros' or a coefficient list")
    else:
        solver_init = tuple(float(v) for v in solver_init)

    prop = dict(_take(raw, "propensity", {}))
    prop_form = _take(prop, "form", "logistic_linear")
    include_intercept = bool(_take(prop, "include_intercept", True))
    fixed_value = _take(prop, "fixed_value")
    _no_leftovers(prop, "propensity")
    if prop_form not in ("constant", "logistic_linear"):
        raise InputError("propensity.form must be 'constant' or 'logistic_linear'")
    if fixed_value is not None:
        fixed_value = float(fixed_value)
        if not 0.0 < fixed_value < 1.0:
            raise InputError("propensity.fixed_value must lie in (0, 1)")

    outcome = _parse_outcome(_take(raw, "outcome", {}))

    roots = dict(_take(raw, "root_search", {}))
    root_lo_q = float(_take(roots, "lo_q", 0.025))
    root_hi_q = float(_take(roots, "hi_q", 0.975))
    root_grid_points = int(_positive(_take(roots, "grid_points", 400), "root_search.grid_points", int))
    _no_leftovers(roots, "root_search")
    if not 0.0 <= root_lo_q < root_hi_q <= 1.0:
        raise InputError("root_search quantiles must satisfy 0 <= lo_q < hi_q <= 1")

    level = float(_take(raw, "level", 0.95))
    if not 0.0 < level < 1.0:
        raise InputError("level must lie in (0, 1)")

    settings = EstimatorSettings(
        kernel=str(_take(raw, "kernel", "epanechnikov")),
        pilot_c=_positive(_take(raw, "pilot_c", 0.7), "pilot_c"),
        cv_lo=cv_lo,
        cv_hi=cv_hi,
        cv_size=cv_size,
        solver_init=solver_init,
        solver_tol=solver_tol,
        solver_max_iter=solver_max_iter,
        clip_floor=float(_take(raw, "clip_floor", 1e-3)),
        propensity_form=prop_form,
        propensity_fixed_value=fixed_value,
        include_intercept=include_intercept,
        outcome_basis=outcome,
        root_lo_q=root_lo_q,
        root_hi_q=root_hi_q,
        root_grid_points=root_grid_points,
        level=level,
    )
    settings.kernel_spec()  # validates the family name

    scenario = _take(raw, "scenario")
    scenario = _parse_scenario(scenario) if scenario is not None else None
    case = str(_take(raw, "case", "I"))
    if case not in CASES:
        raise InputError(f"case must be one of {CASES}")

    reps = int(_positive(_take(raw, "reps", 200), "reps", int))
    seed = int(_take(raw, "seed", 0))
    bootstrap = int(_positive(_take(raw, "bootstrap", 500), "bootstrap", int))
    threads = _take(raw, "threads")
    threads = None if threads is None else int(_positive(threads, "threads", int))
    truth_draws = int(_positive(_take(raw, "truth_draws", 10**6), "truth_draws", int))
    grid_points = int(_positive(_take(raw, "grid_points", 101), "grid_points", int))
    out = _take(raw, "out")

    _no_leftovers(raw, "config")
    return RunConfig(
        mode=mode,
        settings=settings,
        scenario=scenario,
        case=case,
        reps=reps,
        seed=seed,
        bootstrap=bootstrap,
        threads=threads,
        truth_draws=truth_draws,
        grid_points=grid_points,
        out=out,
    )


def config_to_dict(cfg: RunConfig) -> dict:
    """Inverse of ``parse_config`` (parse -> serialise -> parse is identity)."""
    s = cfg.settings
    out = {
        "kernel": s.kernel,
        "pilot_c": s.pilot_c,
        "cv": {"lo": s.cv_lo, "hi": s.cv_hi, "size": s.cv_size},
        "solver": {
            "tol": s.solver_tol,
            "max_iter": s.solver_max_iter,
            "init": list(s.solver_init) if not isinstance(s.solver_init, str) else s.solver_init,
        },
        "clip_floor": s.clip_floor,
        "propensity": {
            "form": s.propensity_form,
            "include_intercept": s.include_intercept,
            "fixed_value": s.propensity_fixed_value,
        },
        "outcome": {
            "basis": s.outcome_basis.kind,
            "terms": [dict(t) for t in s.outcome_basis.terms],
        },
        "root_search": {
            "lo_q": s.root_lo_q,
            "hi_q": s.root_hi_q,
            "grid_points": s.root_grid_points,
        },
        "level": s.level,
        "case": cfg.case,
        "reps": cfg.reps,
        "seed": cfg.seed,
        "bootstrap": cfg.bootstrap,
        "threads": cfg.threads,
        "truth_draws": cfg.truth_draws,
        "grid_points": cfg.grid_points,
        "out": cfg.out,
    }
    if cfg.mode is not None:
        out["mode"] = cfg.mode
    if cfg.scenario is not None:
        scn = cfg.scenario
        out["scenario"] = {
            "q0": scn.q0,
            "mu0": scn.mu0,
            "pi0": scn.pi0,
            "error": scn.error,
            "n": scn.n,
            "d": scn.d,
            "beta0": list(scn.beta0),
            "alpha0": list(scn.alpha0),
            "alpha10": list(scn.alpha10),
            "alpha20": list(scn.alpha20),
            "gamma0": list(scn.gamma0),
        }
    return out


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: line {exc.lineno}") from exc
    return parse_config(raw)
