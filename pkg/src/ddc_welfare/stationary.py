"""Stationary law of the controlled chain, its time reversal, and lambda.

lambda(x) = sum_k beta^k E[w(x_{-k}) | x] is computed from the backward
kernel ``B(y|x) = P(x|y) pi(y) / pi(x)``, i.e. lambda solves
``(I - beta B) lambda = w``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.sparse.csgraph import connected_components

from .exceptions import DegenerateStateError, ReducibleChainError

PI_FLOOR = 1e-12


@dataclass(frozen=True)
class StationaryDistribution:
    pi: NDArray
    residual: float


@dataclass(frozen=True)
class BackwardKernel:
    B: NDArray


@dataclass(frozen=True)
class LambdaVector:
    lam: NDArray
    residual: float


def check_irreducible(P: NDArray) -> None:
    n_comp, labels = connected_components(np.asarray(P) > 0, directed=True,
                                          connection="strong")
    if n_comp > 1:
        comps = [np.flatnonzero(labels == c).tolist() for c in range(n_comp)]
        raise ReducibleChainError(
            f"chain is reducible: {n_comp} communicating classes, e.g. states {comps[-1]} "
            "are not mutually reachable with the rest", comps)


def stationary_distribution(P: NDArray, check: bool = True) -> StationaryDistribution:
    """Left unit eigenvector of a row-stochastic irreducible matrix."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    if check:
        check_irreducible(P)
    # (P^T - I) pi = 0 with one equation swapped for sum(pi) = 1
    M = P.T - np.eye(n)
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = np.linalg.solve(M, rhs)
    # one refinement step absorbs the swapped equation's rounding
    pi = pi @ P
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    residual = float(np.max(np.abs(pi @ P - pi)))
    return StationaryDistribution(pi, residual)


def backward_kernel(P: NDArray, stat: StationaryDistribution | NDArray,
                    tol: float = 1e-10) -> BackwardKernel:
    pi = stat.pi if isinstance(stat, StationaryDistribution) else np.asarray(stat, float)
    low = np.flatnonzero(pi < PI_FLOOR)
    if low.size:
        raise DegenerateStateError(f"stationary mass below {PI_FLOOR} at states {low.tolist()}")
    B = P.T * pi[None, :] / pi[:, None]
    dev = np.abs(B.sum(axis=1) - 1.0)
    if dev.max() > tol:
        raise DegenerateStateError(
            f"backward kernel row {int(dev.argmax())} sums to {B[dev.argmax()].sum():.15g}; "
            "pi is not stationary for P")
    return BackwardKernel(B)


def solve_lambda(w: NDArray, B: BackwardKernel | NDArray, beta: float) -> LambdaVector:
    Bm = B.B if isinstance(B, BackwardKernel) else np.asarray(B, float)
    w = np.asarray(w, dtype=float)
    lam = np.linalg.solve(np.eye(len(w)) - beta * Bm, w)
    return LambdaVector(lam, lambda_residual(lam, w, Bm, beta))


def lambda_residual(lam, w, B, beta) -> float:
    Bm = B.B if isinstance(B, BackwardKernel) else np.asarray(B, float)
    lam = lam.lam if isinstance(lam, LambdaVector) else np.asarray(lam, float)
    return float(np.max(np.abs(w - lam + beta * (Bm @ lam))))


def verify_lambda_identity(lam, w, B, beta: float, pi: NDArray, n_test: int = 16,
                           seed: int = 0) -> dict:
    """Residual of the lambda recursion plus its weak form under pi.

    The weak form is ``E_pi[(w - lambda + beta B lambda) h]`` for standard
    normal test functions ``h``; both vanish when lambda is exact.
    """
    Bm = B.B if isinstance(B, BackwardKernel) else np.asarray(B, float)
    lam = lam.lam if isinstance(lam, LambdaVector) else np.asarray(lam, float)
    pi = pi.pi if isinstance(pi, StationaryDistribution) else np.asarray(pi, float)
    r = w - lam + beta * (Bm @ lam)
    H = np.random.default_rng(seed).standard_normal((n_test, len(w)))
    weak = H @ (pi * r)
    return {"residual": float(np.max(np.abs(r))),
            "weak_max": float(np.max(np.abs(weak))),
            "n_test": n_test}
