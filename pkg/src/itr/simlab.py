"""Synthetic study designs, the replicate runner and Monte-Carlo truth oracles.

Six stock designs cover every combination of: linear / sinusoidal-monotone /
non-monotone contrast, homoscedastic / index-dependent noise, and constant /
logistic treatment assignment.  Four working-model cases per design probe the
multi-robustness of the estimator (both models right, one wrong, both wrong).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .data import Dataset
from .errors import EstimationError, InputError
from .nuisance import OutcomeBasis
from .pipeline import EstimatorSettings, fit_policy

__all__ = [
    "Scenario",
    "scenario_by_number",
    "case_models",
    "generate",
    "true_value_mc",
    "true_roots",
    "StudyReport",
    "TargetRow",
    "run_study",
]

CASES = ("I", "II", "III", "IV")

Q0_KINDS = ("linear_2t", "t_plus_sin_t", "t_sq_minus_2")
MU0_KINDS = ("linear", "sin_plus_halfquad")
PI0_KINDS = ("const_half", "expit_gamma0")
ERROR_KINDS = ("normal_var_quarter", "hetero_log", "zero")


@dataclass(frozen=True)
class Scenario:
    """A data-generating design for the observational sample."""

    q0: str
    mu0: str
    pi0: str
    error: str
    n: int = 500
    d: int = 4
    beta0: tuple = (1.0, 1.0, -1.0, 1.0)
    alpha0: tuple = (1.0, -1.0, 1.0, 1.0)
    alpha10: tuple = (1.0, -1.0, 1.0, 1.0)
    alpha20: tuple = (1.0, 0.0, -1.0, 0.0)
    gamma0: tuple = (0.1, 0.0, -0.1, 0.0)

    def __post_init__(self):
        for name, allowed in (
            ("q0", Q0_KINDS),
            ("mu0", MU0_KINDS),
            ("pi0", PI0_KINDS),
            ("error", ERROR_KINDS),
        ):
            if getattr(self, name) not in allowed:
                raise InputError(f"{name} must be one of {allowed}")
        if self.beta0[0] != 1.0:
            raise InputError("beta0 must be anchored with first component 1")
        for name in ("beta0", "alpha0", "alpha10", "alpha20", "gamma0"):
            if len(getattr(self, name)) != self.d:
                raise InputError(f"{name} must have length d = {self.d}")

    def q0_fun(self, t):
        t = np.asarray(t, dtype=float)
        if self.q0 == "linear_2t":
            return 2.0 * t
        if self.q0 == "t_plus_sin_t":
            return t + np.sin(t)
        return t * t - 2.0

    def mu0_fun(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.mu0 == "linear":
            return 1.0 + x @ np.asarray(self.alpha0)
        return (
            1.0
            + np.sin(x @ np.asarray(self.alpha10))
            + 0.5 * (x @ np.asarray(self.alpha20)) ** 2
        )

    def pi0_fun(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.pi0 == "const_half":
            return np.full(x.shape[0], 0.5)
        return expit(x @ np.asarray(self.gamma0))

    def error_sd(self, index):
        index = np.asarray(index, dtype=float)
        if self.error == "normal_var_quarter":
            return np.full(index.shape, 0.5)
        if self.error == "hetero_log":
            return np.sqrt(np.log(index**2 + 1.0))
        return np.zeros(index.shape)


_SCENARIO_FIELDS = {
    1: ("linear_2t", "linear", "const_half", "normal_var_quarter"),
    2: ("t_plus_sin_t", "sin_plus_halfquad", "const_half", "hetero_log"),
    3: ("t_sq_minus_2", "sin_plus_halfquad", "const_half", "hetero_log"),
    4: ("linear_2t", "linear", "expit_gamma0", "normal_var_quarter"),
    5: ("t_plus_sin_t", "sin_plus_halfquad", "expit_gamma0", "hetero_log"),
    6: ("t_sq_minus_2", "sin_plus_halfquad", "expit_gamma0", "hetero_log"),
}


def scenario_by_number(number: int, n: int = 500) -> Scenario:
    """The six stock designs, numbered 1 through 6."""
    try:
        q0, mu0, pi0, error = _SCENARIO_FIELDS[int(number)]
    except (KeyError, ValueError) as exc:
        raise InputError(f"scenario number must be 1..6, got {number!r}") from exc
    return Scenario(q0=q0, mu0=mu0, pi0=pi0, error=error, n=n)


def true_roots(scn: Scenario):
    """Zero crossings of the design's contrast function."""
    if scn.q0 in ("linear_2t", "t_plus_sin_t"):
        return np.array([0.0])
    return np.array([-math.sqrt(2.0), math.sqrt(2.0)])


def generate(scn: Scenario, seed):
    """Draw one observational sample; returns ``(dataset, latents)``.

    ``latents`` holds the potential outcomes ``y0``/``y1`` and the index for
    oracle computations; they never enter the estimators.  Bit-reproducible
    for a given ``(seed, scenario)``.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((scn.n, scn.d))
    index = x @ np.asarray(scn.beta0)
    pi = scn.pi0_fun(x)
    a = (rng.random(scn.n) < pi).astype(float)
    eps = rng.standard_normal(scn.n) * scn.error_sd(index)
    y0 = scn.mu0_fun(x) + eps
    y1 = y0 + scn.q0_fun(index)
    y = a * y1 + (1.0 - a) * y0
    data = Dataset(x, a, y)
    return data, {"y0": y0, "y1": y1, "index": index, "pi": pi}


def true_value_mc(scn: Scenario, draws: int = 10**6, seed: int = 2024):
    """Monte-Carlo oracle for the optimal-rule value; returns ``(value, se)``.

    Averages ``y1 I(q0 > 0) + y0 I(q0 <= 0)`` under the scenario law, which
    recomputes the design's value truth rather than trusting any published
    constant.
    """
    if draws < 10**5:
        raise InputError("the value oracle needs at least 1e5 draws")
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    remaining = int(draws)
    chunk = 250_000
    while remaining > 0:
        m = min(chunk, remaining)
        x = rng.standard_normal((m, scn.d))
        index = x @ np.asarray(scn.beta0)
        eps = rng.standard_normal(m) * scn.error_sd(index)
        y0 = scn.mu0_fun(x) + eps
        q = scn.q0_fun(index)
        vals = y0 + np.where(q > 0.0, q, 0.0)
        total += float(np.sum(vals))
        total_sq += float(np.sum(vals**2))
        remaining -= m
    mean = total / draws
    var = total_sq / draws - mean**2
    return mean, math.sqrt(max(var, 0.0) / draws)


def _correct_outcome_basis(scn: Scenario) -> OutcomeBasis:
    if scn.mu0 == "linear":
        return OutcomeBasis("linear")
    return OutcomeBasis(
        "custom",
        (
            {"type": "power", "exponents": [0.0] * scn.d},
            {"type": "sin", "weights": list(scn.alpha10)},
            {"type": "quad", "weights": list(scn.alpha20)},
        ),
    )


def _wrong_outcome_basis(scn: Scenario) -> OutcomeBasis:
    # misspecify downward: constant when the truth is linear, linear when the
    # truth is sinusoidal-plus-quadratic
    if scn.mu0 == "linear":
        return OutcomeBasis("constant")
    return OutcomeBasis("linear")


def case_models(scn: Scenario, case: str):
    """Working-model choices for robustness cases I..IV.

    Case I fits both models correctly.  Case II misspecifies the outcome
    model.  Case III misspecifies the propensity: a fixed 0.4 when the truth
    is the constant one half, an intercept-only fit when the truth is
    logistic.  Case IV combines II and III.  Returns
    ``(propensity_form, fixed_value, outcome_basis)``.
    """
    if case not in CASES:
        raise InputError(f"case must be one of {CASES}")
    mu_right = _correct_outcome_basis(scn)
    mu_wrong = _wrong_outcome_basis(scn)
    if scn.pi0 == "const_half":
        pi_right = ("constant", None)
        pi_wrong = ("constant", 0.4)
    else:
        pi_right = ("logistic_linear", None)
        pi_wrong = ("constant", None)
    table = {
        "I": (*pi_right, mu_right),
        "II": (*pi_right, mu_wrong),
        "III": (*pi_wrong, mu_right),
        "IV": (*pi_wrong, mu_wrong),
    }
    return table[case]


# ---------------------------------------------------------------------------
# replicate studies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetRow:
    """Aggregate metrics for one reported target (a coefficient, the value,
    or one decision-boundary root)."""

    parameter: str
    true: float
    estimate: float
    sd: float
    sd_hat: float
    cvg: float
    mse: float
    found_share: float = 1.0

    def as_csv_row(self):
        return [
            self.parameter,
            self.true,
            self.estimate,
            self.sd,
            self.sd_hat,
            self.cvg,
            self.mse,
        ]


@dataclass
class StudyReport:
    """Aggregated replicate study with full provenance."""

    scenario: Scenario
    case: str
    reps: int
    seed: int
    rows: list
    n_failed: int
    failures: list
    value_truth: float
    value_truth_se: float
    solver_init: str
    single_replicate: bool = False

    def row(self, parameter: str) -> TargetRow:
        for r in self.rows:
            if r.parameter == parameter:
                return r
        raise KeyError(parameter)

    def to_dict(self):
        return {
            "scenario": {
                "q0": self.scenario.q0,
                "mu0": self.scenario.mu0,
                "pi0": self.scenario.pi0,
                "error": self.scenario.error,
                "n": self.scenario.n,
                "d": self.scenario.d,
            },
            "case": self.case,
            "reps": self.reps,
            "seed": self.seed,
            "n_failed": self.n_failed,
            "failures": self.failures[:20],
            "value_truth": self.value_truth,
            "value_truth_se": self.value_truth_se,
            "solver_init": self.solver_init,
            "single_replicate": self.single_replicate,
            "rows": [
                {
                    "parameter": r.parameter,
                    "true": r.true,
                    "estimate": r.estimate,
                    "sd": r.sd,
                    "sd_hat": r.sd_hat,
                    "cvg": r.cvg,
                    "mse": r.mse,
                    "found_share": r.found_share,
                }
                for r in self.rows
            ],
        }


def _replicate_task(args):
    scn, case, settings, seed, rep = args
    prop_form, fixed_value, basis = case_models(scn, case)
    rep_settings = settings.with_case_models(prop_form, fixed_value, basis)
    data, _ = generate(scn, np.random.SeedSequence([int(seed), int(rep)]))
    try:
        report = fit_policy(data, rep_settings)
    except Exception as exc:  # noqa: BLE001 - replicate failures are data
        return rep, None, f"{type(exc).__name__}: {exc}"
    z = norm.ppf(1.0 - (1.0 - settings.level) / 2.0)
    out = {
        "beta": report.beta[1:].tolist(),
        "beta_sd": report.beta_sd.tolist(),
        "v_hat": report.value.v_hat,
        "v_sd": report.value_sd,
        "roots": [
            (ri.root, ri.bias_hat, ri.sd_hat) for ri in report.root_inferences
        ],
        "z": z,
    }
    return rep, out, None


def _match_roots(found, targets):
    """Greedy nearest pairing of found roots to target roots, no reuse."""
    pairs = {}
    used = set()
    order = sorted(
        ((abs(f[0] - t), k, j) for j, t in enumerate(targets) for k, f in enumerate(found)),
    )
    for _, k, j in order:
        if j in pairs or k in used:
            continue
        pairs[j] = found[k]
        used.add(k)
    return pairs


def run_study(
    scn: Scenario,
    case: str,
    reps: int,
    seed: int,
    settings: EstimatorSettings = EstimatorSettings(),
    threads: int = 1,
    value_truth: tuple | None = None,
    truth_draws: int = 10**6,
    max_failure_share: float = 0.05,
) -> StudyReport:
    """Run ``reps`` independent replicates of one design/case and aggregate.

    Replicate streams are spawned from ``(seed, replicate)`` so serial and
    parallel runs agree bit for bit.  Replicate-level failures are recorded
    and excluded; more than ``max_failure_share`` of them raises.
    """
    if reps < 1:
        raise InputError("need at least one replicate")
    if value_truth is None:
        value_truth = true_value_mc(scn, truth_draws, seed=int(seed) + 10_000)
    v_true, v_true_se = value_truth

    tasks = [(scn, case, settings, seed, rep) for rep in range(reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=1))
    else:
        results = [_replicate_task(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    oks = [r[1] for r in results if r[1] is not None]
    failures = [f"rep {r[0]}: {r[2]}" for r in results if r[2] is not None]
    n_failed = len(failures)
    if n_failed > max_failure_share * reps:
        raise EstimationError(
            f"{n_failed} of {reps} replicates failed; first: {failures[0]}"
        )
    if not oks:
        raise EstimationError("every replicate failed")

    beta0 = np.asarray(scn.beta0)
    targets = true_roots(scn)
    rows = []
    single = len(oks) == 1

    def _aggregate(name, truth, estimates, sds, covers, found_share=1.0):
        est = np.asarray(estimates, dtype=float)
        r_count = est.size
        mean = float(np.mean(est))
        sd = float(np.std(est, ddof=1)) if r_count > 1 else float("nan")
        sd_hat_arr = np.asarray(sds, dtype=float)
        sd_hat = float(np.nanmean(sd_hat_arr)) if sd_hat_arr.size else float("nan")
        cover_arr = np.asarray(covers, dtype=float)
        cvg = float(np.nanmean(cover_arr)) if cover_arr.size else float("nan")
        mse = float(np.mean((est - truth) ** 2))
        rows.append(
            TargetRow(name, float(truth), mean, sd, sd_hat, cvg, mse, found_share)
        )

    z = oks[0]["z"]
    for j in range(scn.d - 1):
        truth = beta0[j + 1]
        ests = [o["beta"][j] for o in oks]
        sds = [o["beta_sd"][j] for o in oks]
        covers = [
            abs(o["beta"][j] - truth) <= z * o["beta_sd"][j] for o in oks
        ]
        _aggregate(f"beta_{j + 2}", truth, ests, sds, covers)

    v_ests = [o["v_hat"] for o in oks]
    v_sds = [o["v_sd"] for o in oks]
    v_cov = [abs(o["v_hat"] - v_true) <= z * o["v_sd"] for o in oks]
    _aggregate("value", v_true, v_ests, v_sds, v_cov)

    for j, target in enumerate(targets):
        ests, sds, covers = [], [], []
        n_found = 0
        for o in oks:
            pairs = _match_roots(o["roots"], targets)
            if j not in pairs:
                continue
            n_found += 1
            root, bias_hat, sd_hat = pairs[j]
            ests.append(root)
            if np.isfinite(bias_hat) and np.isfinite(sd_hat):
                sds.append(sd_hat)
                covers.append(abs((root - bias_hat) - target) <= z * sd_hat)
            else:
                sds.append(np.nan)
                covers.append(np.nan)
        if ests:
            _aggregate(
                f"root_{j + 1}", target, ests, sds, covers, n_found / len(oks)
            )
        else:
            rows.append(
                TargetRow(
                    f"root_{j + 1}",
                    float(target),
                    float("nan"),
                    float("nan"),
                    float("nan"),
                    float("nan"),
                    float("nan"),
                    0.0,
                )
            )

    return StudyReport(
        scenario=scn,
        case=case,
        reps=reps,
        seed=seed,
        rows=rows,
        n_failed=n_failed,
        failures=failures,
        value_truth=float(v_true),
        value_truth_se=float(v_true_se),
        solver_init=str(settings.solver_init),
        single_replicate=single,
    )
