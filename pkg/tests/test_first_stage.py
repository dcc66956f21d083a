
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddc_welfare import Dataset, build_constant_weight, simulate
from ddc_welfare.bellman import inf_norm
from ddc_welfare.exceptions import EstimationError
from ddc_welfare.first_stage import (FirstStageConfig, estimate_ccp, estimate_lambda,
                                     estimate_transition, fit_folds, fit_nuisances, make_folds,
                                     oracle_nuisances, shrink_to_uniform)
from ddc_welfare.weights import build_counterfactual_weight


def _counts_dataset(counts):
    x, a = [], []
    for s, row in enumerate(counts):
        for j, c in enumerate(row):
            x += [s] * c
            a += [j] * c
    return Dataset(x, a, np.zeros(len(x), dtype=int))


def test_frequency_no_smoothing():
    p = estimate_ccp(_counts_dataset([[7, 3]]), 1, 2, alpha=0.0)
    np.testing.assert_allclose(p, [[0.7, 0.3]])


def test_frequency_pure_smoothing():
    p = estimate_ccp(_counts_dataset([[2, 2], [0, 0]]), 2, 2, alpha=0.5)
    np.testing.assert_allclose(p[1], [0.5, 0.5])


def test_unvisited_state_without_smoothing():
    with pytest.raises(EstimationError) as exc:
        estimate_ccp(_counts_dataset([[2, 2], [0, 0]]), 2, 2, alpha=0.0)
    assert exc.value.state == 1


def test_logit_saturated_matches_frequency():
    d = _counts_dataset([[7, 3, 5], [1, 8, 2], [4, 4, 1], [6, 1, 9]])
    freq = estimate_ccp(d, 4, 3, alpha=0.0)
    logit = estimate_ccp(d, 4, 3, method="logit", ridge=0.0, fit_intercept=False,
                         features=np.eye(4))
    np.testing.assert_allclose(logit, freq, atol=1e-4)


def test_logit_ridge_shrinks_toward_uniform():
    d = _counts_dataset([[9, 1], [1, 9]])
    feats = np.array([[0.0], [1.0]])
    weak = estimate_ccp(d, 2, 2, "logit", features=feats, ridge=1e-4)
    strong = estimate_ccp(d, 2, 2, "logit", features=feats, ridge=10.0)
    assert np.abs(strong - 0.5).max() < np.abs(weak - 0.5).max()


def test_unknown_ccp_method():
    with pytest.raises(ValueError):
        estimate_ccp(_counts_dataset([[1, 1]]), 1, 2, method="forest")


def test_transition_deterministic_concentrates():
    d = Dataset([0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0])
    f = estimate_transition(d, 2, 2, alpha=1e-8)
    assert f[0, 0, 1] > 1 - 1e-7 and f[1, 1, 0] > 1 - 1e-7
    np.testing.assert_allclose(f.sum(2), 1.0)
    np.testing.assert_allclose(f[0, 1], 0.5)  # unvisited cell


def test_transition_large_alpha_uniform():
    d = Dataset([0, 1], [0, 1], [1, 0])
    np.testing.assert_allclose(estimate_transition(d, 2, 2, alpha=1e9), 0.5, atol=1e-8)


def test_transition_consistency_bound(small_truth):
    d = simulate(small_truth, 100_000, seed=4)
    f = estimate_transition(d, 6, 3, alpha=0.1)
    counts = np.bincount(d.x * 3 + d.a, minlength=18)
    assert np.abs(f - small_truth.model.kernel).max() <= 5 / np.sqrt(counts.min())


def test_rates_improve_with_n(small_truth):
    ep, ef = [], []
    for n in (1_000, 10_000, 100_000):
        d = simulate(small_truth, n, seed=n)
        ep.append(np.abs(estimate_ccp(d, 6, 3) - small_truth.ccp).max())
        ef.append(np.abs(estimate_transition(d, 6, 3) - small_truth.model.kernel).max())
    assert ep[0] > ep[2] and ef[0] > ef[1] > ef[2]


def test_lambda_plugin_constant_weight():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(2), 5)
    f = rng.dirichlet(np.ones(5), (5, 2))
    lam, info = estimate_lambda(p, f, build_constant_weight(5), 0.9)
    np.testing.assert_allclose(lam, 10.0, atol=1e-12)
    assert info["lambda_source"] == "model"


def test_lambda_exact_inputs(small_truth):
    w = build_counterfactual_weight(np.array([1, 2, 3, 4, 5, 0]), small_truth.stationary)
    lam, _ = estimate_lambda(small_truth.ccp, small_truth.model.kernel, w, 0.9)
    np.testing.assert_allclose(lam, small_truth.lam(w), atol=1e-10)


def test_lambda_first_order_in_kernel(small_truth):
    m = small_truth.model
    w = np.random.default_rng(1).normal(size=6)
    lam0 = small_truth.lam(w)
    alt = np.random.default_rng(2).dirichlet(np.ones(6), (6, 3))
    errs = [inf_norm(estimate_lambda(small_truth.ccp, m.kernel + e * (alt - m.kernel), w,
                                     0.9)[0] - lam0) for e in (1e-3, 5e-4)]
    assert 1.8 <= errs[0] / errs[1] <= 2.2


def test_lambda_reducible_fallback():
    p = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    f = np.zeros((3, 2, 3))
    f[:, 0] = np.eye(3)
    f[:, 1] = 1 / 3
    d = Dataset([0, 1, 2, 2], [0, 0, 0, 0], [0, 1, 2, 2])
    with pytest.warns(UserWarning, match="reducible"):
        lam, info = estimate_lambda(p, f, np.array([1.0, 0.0, -1.0]), 0.9, data=d)
    assert info["fallback"] == "reducible_estimated_chain"
    assert np.isfinite(lam).all()


def test_lambda_empirical_source_constant_weight(small_truth):
    d = simulate(small_truth, 2000, seed=3)
    lam, info = estimate_lambda(small_truth.ccp, small_truth.model.kernel, np.ones(6), 0.9,
                                data=d, source="empirical")
    np.testing.assert_allclose(lam, 10.0, atol=1e-10)


@given(st.integers(2, 400), st.integers(2, 10), st.integers(0, 1000))
def test_folds_partition(n, K, seed):
    if K > n:
        with pytest.raises(ValueError):
            make_folds(n, K, seed)
        return
    folds = make_folds(n, K, seed)
    sizes = np.bincount(folds.fold_of, minlength=K)
    assert sizes.sum() == n and sizes.max() - sizes.min() <= 1
    idx = np.concatenate([folds.indices(k) for k in range(K)])
    assert np.array_equal(np.sort(idx), np.arange(n))


def test_fit_folds_complements_and_determinism(small_model, small_truth):
    d = simulate(small_truth, 2000, seed=8)
    w = build_constant_weight(6)
    folds, nuis = fit_folds(d, small_model, w, K=2, seed=1)
    assert not np.allclose(nuis[0].p, nuis[1].p)
    for k, g in enumerate(nuis):
        assert g.value.residual <= 1e-10
        assert g.provenance["n_fit"] == folds.complement(k).size
    folds2, nuis2 = fit_folds(d, small_model, w, K=2, seed=1)
    np.testing.assert_array_equal(folds.fold_of, folds2.fold_of)
    np.testing.assert_array_equal(nuis[0].p, nuis2[0].p)


def test_pooled_mode_matches_whole_sample(small_model, small_truth):
    d = simulate(small_truth, 1000, seed=8)
    w = build_constant_weight(6)
    with pytest.raises(ValueError, match="K >= 2"):
        fit_folds(d, small_model, w, K=1)
    _, (g,) = fit_folds(d, small_model, w, K=1, pooled=True)
    whole = fit_nuisances(d, small_model, w)
    np.testing.assert_array_equal(g.p, whole.p)
    np.testing.assert_array_equal(g.f, whole.f)


def test_fold_error_carries_fold_id(small_model, small_truth):
    d = simulate(small_truth, 30, seed=8)
    cfg = FirstStageConfig(alpha_ccp=0.0)
    with pytest.raises(EstimationError) as exc:
        fit_folds(d, small_model, build_constant_weight(6), K=5, seed=0, config=cfg)
    assert exc.value.fold is not None and exc.value.state is not None


def test_bias_knob():
    q = np.array([[0.9, 0.1]])
    np.testing.assert_allclose(shrink_to_uniform(q, 0.2), [[0.82, 0.18]])
    assert shrink_to_uniform(q, 0.0) is q


def test_config_round_trip():
    cfg = FirstStageConfig(ccp_method="logit", eta_p=0.2)
    assert FirstStageConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        FirstStageConfig.from_dict({"bogus": 1})


def test_oracle_nuisances(small_truth):
    g = oracle_nuisances(small_truth, np.ones(6))
    np.testing.assert_allclose(g.V, small_truth.V, atol=1e-8)
    np.testing.assert_allclose(g.lam, 10.0, atol=1e-12)
    g2 = g.replace(f=shrink_to_uniform(g.f, 0.3))
    assert not np.allclose(g2.V, g.V)
    np.testing.assert_array_equal(g.replace(lam=g.lam * 2).V, g.V)
