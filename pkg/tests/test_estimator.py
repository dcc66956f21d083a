import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddc_welfare import (build_constant_weight, build_counterfactual_weight, random_model,
                         simulate, solve_truth, true_theta)
from ddc_welfare.bellman import conditional_values, solve_value_ccp
from ddc_welfare.estimator import (cross_fit_estimate, enumeration_records, evaluate_moment,
                                   g_delta, moment_orthogonal, moment_orthogonal_alt_dr,
                                   moment_plugin, moment_structural_projected, population_mean,
                                   projection_factor, summarize_moments)
from ddc_welfare.exceptions import UnsupportedVariantError
from ddc_welfare.first_stage import (NuisanceSet, estimate_lambda, fit_folds, make_folds,
                                     oracle_nuisances, shrink_to_uniform)
from ddc_welfare.model import EULER_GAMMA, ModelSpec, expected_current_utility

from conftest import constant_utility_model

seeds = st.integers(0, 2**32 - 1)


def _weights(truth):
    S = truth.model.n_states
    t = (np.arange(S) + 1) % S
    return [build_constant_weight(S), build_counterfactual_weight(t, truth.stationary)]


def _brute_force_mean(truth, gamma, w, variant):
    # explicit triple loop, independent of enumeration_records
    m = truth.model
    from ddc_welfare.simulator import Dataset
    total = 0.0
    for x in range(m.n_states):
        for a in range(m.n_actions):
            for y in range(m.n_states):
                prob = truth.pi[x] * truth.ccp[x, a] * m.kernel[x, a, y]
                total += prob * evaluate_moment(variant, Dataset([x], [a], [y]), gamma, w)[0]
    return total


def test_plugin_exact_nuisances(small_truth):
    for w in _weights(small_truth):
        g0 = oracle_nuisances(small_truth, w)
        assert population_mean(small_truth, g0, w, "plugin") == pytest.approx(
            true_theta(small_truth, w), abs=1e-10)


def test_plugin_zero_weight(small_truth):
    g0 = oracle_nuisances(small_truth, np.zeros(6))
    recs, _ = enumeration_records(small_truth)
    assert np.all(moment_plugin(recs, g0, np.zeros(6)) == 0)


def test_plugin_constant_model():
    m = constant_utility_model(c=0.3, n_actions=2)
    t = solve_truth(m)
    w = np.arange(5.0)
    recs, _ = enumeration_records(t)
    np.testing.assert_allclose(moment_plugin(recs, oracle_nuisances(t, w), w),
                               w[recs.x] * (0.3 + math.log(2) + EULER_GAMMA) / 0.1, atol=1e-9)


@given(seeds, st.integers(2, 12), st.integers(2, 3))
def test_orthogonal_population_identity(seed, S, J):
    truth = solve_truth(random_model(seed, S, J))
    for w in _weights(truth):
        g0 = oracle_nuisances(truth, w)
        th = true_theta(truth, w)
        for v in ("orthogonal", "orthogonal_policy"):
            assert population_mean(truth, g0, w, v) == pytest.approx(th, abs=1e-8)


def test_enumeration_matches_brute_force(small_truth):
    w = _weights(small_truth)[1]
    g = oracle_nuisances(small_truth, w).replace(f=shrink_to_uniform(small_truth.model.kernel,
                                                                     0.2))
    for v in ("plugin", "orthogonal", "orthogonal_policy"):
        assert population_mean(small_truth, g, w, v) == pytest.approx(
            _brute_force_mean(small_truth, g, w, v), abs=1e-10)


def test_orthogonal_beta_zero_reduces_to_plugin():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(4, 2))
    f = rng.dirichlet(np.ones(4), (4, 2))
    p = rng.dirichlet(np.ones(2), 4)
    V = solve_value_ccp(p, f, u, 0.0)
    g = NuisanceSet(p, f, rng.normal(size=4), V, u, 0.0)
    from ddc_welfare.simulator import Dataset
    d = Dataset(rng.integers(0, 4, 50), rng.integers(0, 2, 50), rng.integers(0, 4, 50))
    w = rng.normal(size=4)
    np.testing.assert_array_equal(moment_orthogonal(d, g, w), moment_plugin(d, g, w))
    np.testing.assert_allclose(moment_orthogonal_alt_dr(d, g), expected_current_utility(u, p)[d.x])


def test_correction_conditional_mean_zero(small_truth):
    g0 = oracle_nuisances(small_truth, np.ones(6))
    fV = conditional_values(g0.f, g0.V)
    resid = np.einsum("xay,y->xa", g0.f, g0.V) - fV
    np.testing.assert_allclose(resid, 0.0, atol=1e-12)
    recs, prob = enumeration_records(small_truth)
    corr = evaluate_moment("orthogonal", recs, g0, np.ones(6)) - moment_plugin(recs, g0,
                                                                              np.ones(6))
    assert abs(prob @ corr) <= 1e-10


def test_alt_dr_requires_constant_weight(small_truth):
    w = _weights(small_truth)[1]
    recs, _ = enumeration_records(small_truth)
    with pytest.raises(UnsupportedVariantError):
        moment_orthogonal_alt_dr(recs, oracle_nuisances(small_truth, w), w)


def test_alt_dr_exact_and_misspecified_kernel(ref_truth):
    w = build_constant_weight(20)
    g0 = oracle_nuisances(ref_truth, w)
    th = true_theta(ref_truth, w)
    assert population_mean(ref_truth, g0, w, "alt_dr") == pytest.approx(th, abs=1e-8)
    g = g0.replace(f=shrink_to_uniform(g0.f, 0.3))
    assert population_mean(ref_truth, g, w, "alt_dr") == pytest.approx(th, abs=1e-8)


@given(seeds)
def test_alt_dr_equals_policy_form_for_any_gamma(seed):
    truth = solve_truth(random_model(seed, 8, 3))
    rng = np.random.default_rng(seed)
    w = np.ones(8)
    g = oracle_nuisances(truth, w).replace(p=rng.dirichlet(np.ones(3), 8),
                                           f=rng.dirichlet(np.ones(8), (8, 3)))
    assert population_mean(truth, g, w, "alt_dr") == pytest.approx(
        population_mean(truth, g, w, "orthogonal_policy"), abs=1e-10)
    # the observed-action form coincides with them at the true CCPs, for any kernel
    g_f = oracle_nuisances(truth, w).replace(f=g.f)
    assert population_mean(truth, g_f, w, "alt_dr") == pytest.approx(
        population_mean(truth, g_f, w, "orthogonal"), abs=1e-10)


def test_single_misspecification_zero_bias(ref_truth):
    for w in _weights(ref_truth):
        g0 = oracle_nuisances(ref_truth, w)
        th = true_theta(ref_truth, w)
        lam_bad = g0.lam + np.random.default_rng(0).normal(size=20) * 5
        for g in (g0.replace(f=shrink_to_uniform(g0.f, 0.3)), g0.replace(lam=lam_bad)):
            assert population_mean(ref_truth, g, w, "orthogonal") == pytest.approx(th, abs=1e-8)


def _joint_bias(truth, eta):
    w = build_constant_weight(truth.model.n_states)
    g0 = oracle_nuisances(truth, w)
    p, f = shrink_to_uniform(truth.ccp, eta), shrink_to_uniform(g0.f, eta)
    lam, _ = estimate_lambda(p, f, w, truth.model.beta)
    g = g0.replace(p=p, f=f, lam=lam)
    th = true_theta(truth, w)
    return (population_mean(truth, g, w, "plugin") - th,
            population_mean(truth, g, w, "orthogonal") - th)


def test_kernel_bias_hits_plugin_only(ref_truth):
    w = build_constant_weight(20)
    g = oracle_nuisances(ref_truth, w)
    g = g.replace(f=shrink_to_uniform(g.f, 0.2))
    th = true_theta(ref_truth, w)
    b_plug = population_mean(ref_truth, g, w, "plugin") - th
    b_orth = population_mean(ref_truth, g, w, "orthogonal") - th
    assert abs(b_plug) > 10 * abs(b_orth) and abs(b_plug) > 1e-2


def test_joint_bias_orders(ref_truth):
    plug = [_joint_bias(ref_truth, e)[0] for e in (0.02, 0.01)]
    orth = [_joint_bias(ref_truth, e)[1] for e in (0.02, 0.01)]
    assert 1.8 <= plug[0] / plug[1] <= 2.2
    assert 3.5 <= orth[0] / orth[1] <= 4.5


@pytest.mark.xfail(strict=True, reason="CCP shrinkage enters both moments at second order; "
                   "at eta=0.2 the ratio is design dependent (3.2 on the default reference "
                   "design). See notes/decisions.md.")
def test_plugin_bias_ten_times_orthogonal_at_eta_02(ref_truth):
    b_plug, b_orth = _joint_bias(ref_truth, 0.2)
    assert abs(b_plug) > 10 * abs(b_orth)


def test_g_delta_zero_features():
    f = np.full((3, 2, 3), 1 / 3)
    m = ModelSpec.from_parameters(np.zeros((3, 2, 1)), np.zeros(1), f, 0.9)
    t = solve_truth(m)
    np.testing.assert_array_equal(g_delta(m, oracle_nuisances(t, np.ones(3))), 0.0)


def test_g_delta_intercept_constant_weight():
    rng = np.random.default_rng(3)
    phi = np.concatenate([np.ones((5, 2, 1)), rng.normal(size=(5, 2, 2))], axis=2)
    m = ModelSpec.from_parameters(phi, rng.normal(size=3), rng.dirichlet(np.ones(5), (5, 2)),
                                  0.9)
    G = g_delta(m, oracle_nuisances(solve_truth(m), np.ones(5)))
    assert G[0] == pytest.approx(1 / (1 - 0.9), abs=1e-10)


def test_g_delta_finite_difference(ref_model, ref_truth):
    for w in _weights(ref_truth):
        G = g_delta(ref_model, oracle_nuisances(ref_truth, w))
        h = 1e-5
        fd = []
        for k in range(ref_model.delta.size):
            e = np.zeros_like(ref_model.delta)
            e[k] = h
            hi = solve_truth(ref_model.with_delta(ref_model.delta + e)).V
            lo = solve_truth(ref_model.with_delta(ref_model.delta - e)).V
            fd.append(ref_truth.pi @ (w.w * (hi - lo)) / (2 * h))
        np.testing.assert_allclose(G, fd, atol=1e-6)


def test_projection_factor():
    with pytest.raises(ValueError):
        projection_factor(np.zeros(3))
    assert projection_factor(np.array([2.5])) == 0.0
    G = np.array([1.0, -2.0, 0.5])
    f1 = projection_factor(G)
    assert f1 == pytest.approx(f1 * f1)


def test_structural_moment_degenerate(ref_model, ref_truth):
    w = np.ones(20)
    g0 = oracle_nuisances(ref_truth, w)
    recs, _ = enumeration_records(ref_truth)
    G = g_delta(ref_model, g0)
    assert np.all(moment_structural_projected(recs, g0, w, G) == 0.0)
    d = simulate(ref_truth, 200, seed=1)
    folds = make_folds(200, 2, 0)
    with pytest.warns(UserWarning):
        rep = cross_fit_estimate(d, folds, [g0, g0], "structural", w, G)
    assert {"structural_projection_degenerate", "degenerate_variance"} <= set(
        rep.degenerate_flags)


def test_unknown_variant(small_truth):
    recs, _ = enumeration_records(small_truth)
    with pytest.raises(UnsupportedVariantError):
        evaluate_moment("bogus", recs, oracle_nuisances(small_truth, np.ones(6)), np.ones(6))


def test_summary_formulae():
    m = np.array([1.0, 2.0, 4.0, 7.0])
    rep = summarize_moments(m, "orthogonal", 2)
    assert rep.theta_hat == 3.5
    assert rep.se == pytest.approx(math.sqrt(np.mean((m - 3.5) ** 2) / 4))
    assert rep.ci_lo == pytest.approx(3.5 - 1.959964 * rep.se, abs=1e-6)
    assert rep.ci_lo < rep.theta_hat < rep.ci_hi


def test_summary_degenerate():
    with pytest.warns(UserWarning):
        rep = summarize_moments(np.full(10, 2.0), "plugin", 2)
    assert rep.theta_hat == 2.0 and rep.se > 0
    assert "degenerate_variance" in rep.degenerate_flags


def test_report_json_fields(small_model, small_truth):
    d = simulate(small_truth, 1000, seed=2)
    folds, nuis = fit_folds(d, small_model, np.ones(6), K=5, seed=3)
    rep = cross_fit_estimate(d, folds, nuis, "orthogonal", np.ones(6))
    out = json.loads(rep.to_json())
    assert set(out) == {"theta_hat", "se", "ci_lo", "ci_hi", "variant", "n", "K", "seed",
                        "nuisance_provenance", "degenerate_flags"}
    assert out["n"] == 1000 and out["K"] == 5 and len(out["nuisance_provenance"]) == 5


def test_oracle_estimate_within_3se(ref_truth):
    w = np.ones(20)
    d = simulate(ref_truth, 50_000, seed=11)
    g0 = oracle_nuisances(ref_truth, w)
    rep = cross_fit_estimate(d, make_folds(d.n, 5, 0), [g0] * 5, "orthogonal", w)
    assert abs(rep.theta_hat - true_theta(ref_truth, w)) <= 3 * rep.se


def test_fold_count_gap_shrinks(ref_model, ref_truth):
    w = np.ones(20)
    gaps = {}
    for n in (500, 8000):
        g = []
        for r in range(12):
            d = simulate(ref_truth, n, seed=1000 * n + r)
            est = [cross_fit_estimate(d, *fit_folds(d, ref_model, w, K, r), "orthogonal",
                                      w).theta_hat for K in (2, 5)]
            g.append(abs(est[0] - est[1]))
        gaps[n] = np.mean(g)
    assert gaps[8000] < gaps[500]
