import numpy as np
import pytest

import itr
from itr import (
    EstimatorSettings,
    InputError,
    Scenario,
    case_models,
    generate,
    run_study,
    scenario_by_number,
    true_roots,
    true_value_mc,
)
from itr.simlab import _match_roots


class TestScenarios:
    def test_six_designs_exist(self):
        for k in range(1, 7):
            scn = scenario_by_number(k, n=100)
            assert scn.n == 100 and scn.d == 4

    def test_unknown_number_rejected(self):
        with pytest.raises(InputError):
            scenario_by_number(7)

    def test_anchor_enforced(self):
        with pytest.raises(InputError):
            Scenario(
                q0="linear_2t",
                mu0="linear",
                pi0="const_half",
                error="zero",
                beta0=(2.0, 1.0, -1.0, 1.0),
            )

    def test_true_roots(self):
        np.testing.assert_allclose(true_roots(scenario_by_number(1)), [0.0])
        np.testing.assert_allclose(
            true_roots(scenario_by_number(3)), [-np.sqrt(2), np.sqrt(2)], atol=1e-12
        )


class TestGenerate:
    def test_zero_noise_is_deterministic_surface(self):
        scn = Scenario(q0="linear_2t", mu0="linear", pi0="const_half", error="zero", n=200)
        data, lat = generate(scn, 3)
        mu = 1.0 + data.x @ np.asarray(scn.alpha0)
        q = 2.0 * (data.x @ np.asarray(scn.beta0))
        np.testing.assert_allclose(data.y, mu + data.a * q, atol=1e-12)
        np.testing.assert_allclose(lat["y1"] - lat["y0"], q, atol=1e-12)

    def test_constant_half_assignment_rate(self):
        scn = scenario_by_number(1, n=100_000)
        data, _ = generate(scn, 11)
        assert abs(data.a.mean() - 0.5) <= 0.005

    def test_bit_reproducible(self):
        scn = scenario_by_number(2, n=300)
        d1, l1 = generate(scn, 17)
        d2, l2 = generate(scn, 17)
        np.testing.assert_array_equal(d1.x, d2.x)
        np.testing.assert_array_equal(d1.y, d2.y)
        np.testing.assert_array_equal(l1["y1"], l2["y1"])

    def test_latents_consistent_with_observed(self):
        scn = scenario_by_number(4, n=500)
        data, lat = generate(scn, 23)
        np.testing.assert_allclose(
            data.y, data.a * lat["y1"] + (1 - data.a) * lat["y0"], atol=1e-12
        )

    def test_logistic_assignment_follows_design(self):
        scn = scenario_by_number(4, n=200_000)
        data, lat = generate(scn, 5)
        # propensity at gamma0 = (0.1, 0, -0.1, 0) without intercept
        from scipy.special import expit

        pi = expit(data.x @ np.asarray(scn.gamma0))
        np.testing.assert_allclose(lat["pi"], pi)
        assert abs(data.a.mean() - pi.mean()) < 0.01


class TestTrueValueOracle:
    def test_sim1_matches_analytic(self):
        # closed form: 1 + 2 E[T 1(T>0)] with T ~ N(0, 4)
        value, se = true_value_mc(scenario_by_number(1), draws=400_000, seed=1)
        analytic = 1.0 + 4.0 / np.sqrt(2.0 * np.pi)
        assert value == pytest.approx(analytic, abs=3.5 * se)
        assert analytic == pytest.approx(2.5958, abs=5e-5)

    def test_sim3_matches_analytic(self):
        # 2 + E[(T^2-2) 1(|T| > sqrt 2)], T ~ N(0, 4), via normal moments
        from scipy.stats import norm

        c = np.sqrt(2.0) / 2.0
        analytic = 2.0 + 4.0 * 2.0 * (c * norm.pdf(c) + 1 - norm.cdf(c)) - 2.0 * 2.0 * (
            1 - norm.cdf(c)
        )
        value, se = true_value_mc(scenario_by_number(3), draws=400_000, seed=2)
        assert value == pytest.approx(analytic, abs=3.5 * se)
        assert analytic == pytest.approx(4.7166, abs=5e-5)

    def test_rejects_too_few_draws(self):
        with pytest.raises(InputError):
            true_value_mc(scenario_by_number(1), draws=10)


class TestCaseModels:
    def test_case_one_correct_for_sim1(self):
        scn = scenario_by_number(1)
        form, fixed, basis = case_models(scn, "I")
        assert form == "constant" and fixed is None and basis.kind == "linear"

    def test_case_three_fixes_point_four_for_constant_truth(self):
        scn = scenario_by_number(1)
        form, fixed, basis = case_models(scn, "III")
        assert form == "constant" and fixed == pytest.approx(0.4)

    def test_case_three_constant_fit_for_logistic_truth(self):
        scn = scenario_by_number(4)
        form, fixed, basis = case_models(scn, "III")
        assert form == "constant" and fixed is None

    def test_case_two_downgrades_outcome(self):
        assert case_models(scenario_by_number(1), "II")[2].kind == "constant"
        assert case_models(scenario_by_number(2), "II")[2].kind == "linear"

    def test_sine_designs_get_custom_basis(self):
        basis = case_models(scenario_by_number(2), "I")[2]
        assert basis.kind == "custom"
        kinds = [t["type"] for t in basis.terms]
        assert kinds == ["power", "sin", "quad"]


class TestRootMatching:
    def test_equal_counts_pair_in_order(self):
        found = [(-1.3, 0.0, 0.1), (1.5, 0.0, 0.1)]
        pairs = _match_roots(found, np.array([-1.4142, 1.4142]))
        assert pairs[0][0] == -1.3 and pairs[1][0] == 1.5

    def test_single_found_matches_nearest(self):
        found = [(1.2, 0.0, 0.1)]
        pairs = _match_roots(found, np.array([-1.4142, 1.4142]))
        assert list(pairs) == [1]

    def test_no_roots(self):
        assert _match_roots([], np.array([0.0])) == {}


class TestRunStudy:
    @staticmethod
    def small_settings():
        return EstimatorSettings(cv_size=10)

    def test_single_replicate_flagged(self):
        scn = scenario_by_number(1, n=250)
        report = run_study(
            scn, "I", reps=1, seed=42, settings=self.small_settings(),
            value_truth=(2.5958, 0.001),
        )
        assert report.single_replicate
        assert np.isnan(report.row("beta_2").sd)
        assert report.reps == 1

    def test_mse_identity(self):
        scn = scenario_by_number(1, n=250)
        report = run_study(
            scn, "I", reps=6, seed=7, settings=self.small_settings(),
            value_truth=(2.5958, 0.001),
        )
        r_eff = report.reps - report.n_failed
        for row in report.rows:
            if np.isnan(row.mse) or row.parameter.startswith("root"):
                continue
            recomputed = (row.estimate - row.true) ** 2 + row.sd**2 * (r_eff - 1) / r_eff
            assert row.mse == pytest.approx(recomputed, abs=1e-12)

    def test_deterministic_across_thread_counts(self):
        scn = scenario_by_number(1, n=250)
        kw = dict(reps=4, seed=3, settings=self.small_settings(), value_truth=(2.5958, 0.001))
        r1 = run_study(scn, "I", threads=1, **kw)
        r2 = run_study(scn, "I", threads=2, **kw)
        assert r1.to_dict() == r2.to_dict()

    def test_failure_share_enforced(self):
        scn = scenario_by_number(1, n=60)
        bad = EstimatorSettings(cv_size=4, pilot_c=0.01)  # degenerate windows
        with pytest.raises(Exception):
            run_study(scn, "I", reps=4, seed=1, settings=bad, value_truth=(2.5958, 0.001))

    def test_report_serializes(self):
        scn = scenario_by_number(1, n=250)
        report = run_study(
            scn, "I", reps=3, seed=9, settings=self.small_settings(),
            value_truth=(2.5958, 0.001),
        )
        d = report.to_dict()
        assert d["case"] == "I"
        assert {r["parameter"] for r in d["rows"]} >= {"beta_2", "beta_3", "beta_4", "value", "root_1"}
        assert d["solver_init"] == "ols"
