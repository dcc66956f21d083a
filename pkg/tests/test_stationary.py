import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddc_welfare import random_model, simulate, solve_truth
from ddc_welfare.exceptions import DegenerateStateError, ReducibleChainError
from ddc_welfare.stationary import (backward_kernel, lambda_residual, solve_lambda,
                                    stationary_distribution, verify_lambda_identity)

seeds = st.integers(0, 2**32 - 1)


def _random_P(seed, n=20):
    return np.random.default_rng(seed).dirichlet(np.ones(n), n)


def test_two_cycle():
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    st_ = stationary_distribution(P)
    np.testing.assert_allclose(st_.pi, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(backward_kernel(P, st_).B, P.T, atol=1e-15)


def test_identical_rows():
    r = np.array([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(stationary_distribution(np.tile(r, (4, 1))).pi, r, atol=1e-14)


@given(seeds)
def test_stationary_against_power_iteration(seed):
    P = _random_P(seed)
    pi = stationary_distribution(P)
    q = np.full(20, 1 / 20)
    for _ in range(2000):
        q = q @ P
    np.testing.assert_allclose(pi.pi, q, atol=1e-12)
    assert pi.residual <= 1e-10 and abs(pi.pi.sum() - 1) <= 1e-12


def test_reducible_chain_names_components():
    P = np.eye(3)
    P[0] = [0.5, 0.5, 0.0]
    P[1] = [0.5, 0.5, 0.0]
    with pytest.raises(ReducibleChainError) as exc:
        stationary_distribution(P)
    assert [2] in exc.value.components


def test_periodic_chain_allowed():
    P = np.roll(np.eye(4), 1, axis=1)
    np.testing.assert_allclose(stationary_distribution(P).pi, 0.25, atol=1e-14)


def test_reversible_chain_backward_equals_forward():
    # random walk on a weighted graph is reversible
    W = np.random.default_rng(0).random((6, 6))
    W = W + W.T
    P = W / W.sum(1, keepdims=True)
    np.testing.assert_allclose(backward_kernel(P, stationary_distribution(P)).B, P, atol=1e-12)


@given(seeds)
def test_backward_rows_sum_to_one(seed):
    P = _random_P(seed, 8)
    B = backward_kernel(P, stationary_distribution(P)).B
    np.testing.assert_allclose(B.sum(1), 1.0, atol=1e-10)


def test_backward_kernel_floor():
    P = np.full((3, 3), 1 / 3)
    with pytest.raises(DegenerateStateError):
        backward_kernel(P, np.array([0.5, 0.5, 0.0]))


def test_backward_kernel_rejects_non_stationary_pi():
    P = np.array([[0.9, 0.1, 0], [0, 0.9, 0.1], [0.1, 0, 0.9]])
    with pytest.raises(DegenerateStateError):
        backward_kernel(P, np.array([0.5, 0.3, 0.2]))


def test_lambda_constant_weight_exact():
    P = _random_P(4, 20)
    B = backward_kernel(P, stationary_distribution(P))
    lam = solve_lambda(np.ones(20), B, 0.9).lam
    np.testing.assert_allclose(lam, 10.0, atol=1e-12)
    r = verify_lambda_identity(np.full(20, 10.0), np.ones(20), B, 0.9,
                               stationary_distribution(P).pi)
    assert r["residual"] <= 1e-14


def test_lambda_beta_zero():
    P = _random_P(5, 6)
    w = np.random.default_rng(5).normal(size=6)
    np.testing.assert_allclose(solve_lambda(w, backward_kernel(P, stationary_distribution(P)),
                                            0.0).lam, w)


@given(seeds, st.floats(0.1, 0.95))
def test_lambda_equals_truncated_series(seed, beta):
    P = _random_P(seed)
    B = backward_kernel(P, stationary_distribution(P)).B
    w = np.random.default_rng(seed).normal(size=20)
    tol = 1e-11
    K = math.ceil(math.log(tol * (1 - beta) / np.abs(w).max()) / math.log(beta))
    series, term = np.zeros(20), w.copy()
    for _ in range(K + 1):
        series += term
        term = beta * B @ term
    lam = solve_lambda(w, B, beta)
    np.testing.assert_allclose(lam.lam, series, atol=10 * tol)
    assert lam.residual <= 1e-10
    assert np.abs(lam.lam).max() <= np.abs(w).max() / (1 - beta) + 1e-12


def test_lambda_perturbation_residual_linear():
    P = _random_P(7, 10)
    B = backward_kernel(P, stationary_distribution(P)).B
    w = np.random.default_rng(7).normal(size=10)
    lam = solve_lambda(w, B, 0.9).lam
    delta = 1e-3 * np.random.default_rng(8).normal(size=10)
    expected = np.abs((np.eye(10) - 0.9 * B) @ delta).max()
    assert lambda_residual(lam + delta, w, B, 0.9) == pytest.approx(expected, rel=1e-6)


@given(seeds)
def test_double_robustness_matrix_identity(seed):
    # E_pi[(w - lam) dV] + E_pi[lam * beta * P dV] = 0 when lam solves the recursion
    rng = np.random.default_rng(seed)
    P = _random_P(seed, 12)
    pi = stationary_distribution(P).pi
    w, dV = rng.normal(size=(2, 12))
    lam = solve_lambda(w, backward_kernel(P, pi), 0.9).lam
    total = pi @ ((w - lam) * dV) + pi @ (lam * 0.9 * (P @ dV))
    assert abs(total) <= 1e-10 * (1 + np.abs(dV).max() * np.abs(lam).max())


def test_stationary_matches_long_path():
    truth = solve_truth(random_model(9, 8))
    data = simulate(truth, 1_000_000, seed=1, mode="path")
    h = np.random.default_rng(0).normal(size=8)
    pi, P = truth.pi, truth.policy
    hc = h - pi @ h
    # Markov-chain CLT variance from the fundamental matrix
    Z = np.linalg.inv(np.eye(8) - P + np.outer(np.ones(8), pi))
    avar = 2 * pi @ (hc * (Z @ hc)) - pi @ hc**2
    assert abs(h[data.x].mean() - pi @ h) <= 3 * np.sqrt(avar / data.n)
