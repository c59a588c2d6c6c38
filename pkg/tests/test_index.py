import numpy as np
import pytest

from itr import (
    Dataset,
    EstimatingContext,
    KernelSpec,
    NuisanceFit,
    OutcomeBasis,
    estimating_equation,
    fit_outcome_gee,
    fit_propensity,
    fixed_propensity,
    multi_start_diagnostic,
    scenario_by_number,
    solve_index,
)
from itr import generate
from itr.nuisance import OutcomeModel


def sim1_context(n=500, seed=0, pilot_h=None):
    scn = scenario_by_number(1, n=n)
    data, _ = generate(scn, np.random.SeedSequence([seed, 0]))
    prop = fit_propensity(data, "constant")
    out = fit_outcome_gee(data, OutcomeBasis("linear"))
    return EstimatingContext(data, NuisanceFit(prop, out), pilot_h=pilot_h, pilot_c=0.55)


class TestEstimatingEquation:
    def test_one_covariate_gives_empty_equation(self):
        data = Dataset(
            np.random.default_rng(0).normal(size=(20, 1)),
            np.r_[np.ones(10), np.zeros(10)],
            np.random.default_rng(1).normal(size=20),
        )
        prop = fit_propensity(data, "constant")
        out = fit_outcome_gee(data, OutcomeBasis("constant"))
        ctx = EstimatingContext(data, NuisanceFit(prop, out))
        assert estimating_equation(ctx, np.zeros(0)).size == 0
        sol = solve_index(ctx)
        assert sol.converged and sol.iterations == 0
        np.testing.assert_array_equal(sol.beta, [1.0])

    def test_constant_free_covariate_zeroes_equation(self):
        rng = np.random.default_rng(3)
        x = np.column_stack([rng.standard_normal(100), np.full(100, 3.0)])
        a = (rng.random(100) < 0.5).astype(float)
        y = rng.standard_normal(100)
        data = Dataset(x, a, y)
        nuis = NuisanceFit(fixed_propensity(0.5), OutcomeModel(OutcomeBasis("constant"), [0.0]))
        ctx = EstimatingContext(data, nuis, pilot_h=0.8, beta_init=np.zeros(1))
        g = estimating_equation(ctx, np.zeros(1))
        assert np.max(np.abs(g)) <= 1e-10

    def test_permutation_invariance(self):
        ctx = sim1_context(n=200, seed=5)
        beta_l = np.array([1.0, -1.0, 1.0])
        g1 = estimating_equation(ctx, beta_l)
        perm = np.random.default_rng(0).permutation(200)
        data_p = ctx.data.subset(perm)
        prop = fit_propensity(data_p, "constant")
        out = fit_outcome_gee(data_p, OutcomeBasis("linear"))
        ctx_p = EstimatingContext(data_p, NuisanceFit(prop, out), pilot_h=ctx.pilot_h)
        g2 = estimating_equation(ctx_p, beta_l)
        np.testing.assert_allclose(g1, g2, atol=1e-11)

    def test_small_at_truth_for_large_sample(self):
        # multi-robust construction: the population equation vanishes at the
        # true index when the working models are correct
        ctx = sim1_context(n=2000, seed=9)
        g = estimating_equation(ctx, np.array([1.0, -1.0, 1.0]))
        assert np.max(np.abs(g)) <= 0.05


class TestSolveIndex:
    def test_scaling_invariance_of_solution(self):
        scn = scenario_by_number(1, n=400)
        data, _ = generate(scn, np.random.SeedSequence([21, 0]))
        lam = 3.7
        prop = fit_propensity(data, "constant")
        out = fit_outcome_gee(data, OutcomeBasis("linear"))
        ctx1 = EstimatingContext(data, NuisanceFit(prop, out), pilot_c=0.55)
        sol1 = solve_index(ctx1)

        data_s = data.with_outcome(lam * data.y)
        out_s = OutcomeModel(out.basis, lam * out.alpha)
        ctx2 = EstimatingContext(
            data_s, NuisanceFit(prop, out_s), pilot_h=ctx1.pilot_h, beta_init=ctx1.beta_init
        )
        sol2 = solve_index(ctx2)
        np.testing.assert_allclose(sol1.beta, sol2.beta, atol=1e-5)

    def test_converged_flag_consistent_with_tolerance(self):
        ctx = sim1_context(n=300, seed=2)
        sol = solve_index(ctx)
        if sol.converged:
            assert sol.equation_norm <= sol.tolerance
        assert sol.beta[0] == 1.0

    def test_solution_near_truth(self):
        ctx = sim1_context(n=500, seed=3)
        sol = solve_index(ctx, init=np.array([1.0, -1.0, 1.0]) + 0.2)
        assert np.max(np.abs(sol.beta[1:] - np.array([1.0, -1.0, 1.0]))) < 0.2

    def test_multi_start_diagnostic_sorted(self):
        ctx = sim1_context(n=200, seed=7)
        sols = multi_start_diagnostic(ctx, n_starts=3, seed=1)
        norms = [s.equation_norm for s in sols]
        assert norms == sorted(norms)
        assert all(s.beta[0] == 1.0 for s in sols)
