"""Value functions by emax iteration and by the CCP linear representation.

``V(x; p, f)`` solves the second-kind equation ``(I - beta P_p) V = U~(p)``
where ``P_p(x, x') = sum_a p(a|x) f(x'|x, a)``. At the true CCPs this agrees
with the emax fixed point. Operator diagnostics use sup norms throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from .exceptions import BoundInapplicableError, ConvergenceError, ModelValidationError
from .model import (ModelSpec, ccp_from_values, check_ccp, check_kernel, emax_logit,
                    expected_current_utility)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000
MAX_DENSE_STATES = 2000

Method = Literal["emax", "direct", "neumann"]


@dataclass(frozen=True)
class ValueFunction:
    V: NDArray
    method: str
    residual: float
    iterations: int = 0

    def __post_init__(self):
        if not np.isfinite(self.V).all():
            raise ConvergenceError("value function has non-finite entries", self.residual)
        self.V.setflags(write=False)


def policy_matrix(p: NDArray, f: NDArray) -> NDArray:
    """State-to-state transition matrix under policy ``p``."""
    return np.einsum("xa,xay->xy", p, f)


def conditional_values(f: NDArray, V: NDArray) -> NDArray:
    """E_f[V(x') | x, a], shape (S, J), by exact summation."""
    return f @ V


def bellman_operator(model: ModelSpec, V: NDArray) -> NDArray:
    return emax_logit(model.utility + model.beta * conditional_values(model.kernel, V))


def solve_value_emax(model: ModelSpec, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER, V0: NDArray | None = None) -> ValueFunction:
    """Emax fixed point by successive approximation.

    Iteration stops once the successive gap is at most ``tol * (1-beta)/beta``,
    which by the contraction property bounds the distance to the fixed point
    by ``tol``. The reported residual is ``||T(V) - V||_inf`` at the returned V.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    beta = model.beta
    stop = tol * (1.0 - beta) / beta
    V = np.zeros(model.n_states) if V0 is None else np.array(V0, dtype=float)
    gap = np.inf
    for it in range(1, max_iter + 1):
        V_new = bellman_operator(model, V)
        gap = float(np.max(np.abs(V_new - V)))
        V = V_new
        if gap <= stop:
            break
    else:
        raise ConvergenceError("emax iteration did not converge", gap, max_iter)
    residual = float(np.max(np.abs(bellman_operator(model, V) - V)))
    return ValueFunction(V, "emax", residual, it)


def choice_specific_values(model: ModelSpec, V) -> NDArray:
    """v(x, a) = u(x, a) + beta * sum_x' f(x'|x, a) V(x')."""
    V = V.V if isinstance(V, ValueFunction) else np.asarray(V, dtype=float)
    if V.shape != (model.n_states,):
        raise ModelValidationError(f"V has shape {V.shape}, expected ({model.n_states},)", "V")
    return model.utility + model.beta * conditional_values(model.kernel, V)


def optimal_ccp(model: ModelSpec, V=None) -> NDArray:
    if V is None:
        V = solve_value_emax(model)
    return ccp_from_values(choice_specific_values(model, V))


def solve_value_ccp(p, f, u, beta: float, method: Method = "direct",
                    tol: float = DEFAULT_TOL, max_terms: int = DEFAULT_MAX_ITER) -> ValueFunction:
    """Solve ``(I - beta P_p) V = U~(x; p)`` for the CCP-implied value.

    ``method="direct"`` uses an LU solve; ``"neumann"`` sums
    ``sum_l (beta P_p)^l U~`` until the next term is below ``tol * (1-beta)``.
    """
    u = u.utility if isinstance(u, ModelSpec) else np.asarray(u, dtype=float)
    S, J = u.shape
    p = check_ccp(p, S, J, tol=1e-10)
    f = check_kernel(f, S, J, tol=1e-10)
    if S > MAX_DENSE_STATES:
        raise ModelValidationError(f"{S} states exceeds dense-solver cap {MAX_DENSE_STATES}",
                                   "n_states")
    U = expected_current_utility(u, p)
    P = policy_matrix(p, f)
    if method == "direct":
        A = np.eye(S) - beta * P
        try:
            V = np.linalg.solve(A, U)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"singular CCP operator: {exc}") from exc
        iterations = 0
    elif method == "neumann":
        V = U.copy()
        term = U.copy()
        stop = tol * (1.0 - beta)
        for iterations in range(1, max_terms + 1):
            term = beta * (P @ term)
            V += term
            if np.max(np.abs(term)) < stop:
                break
        else:
            raise ConvergenceError("Neumann series did not converge",
                                   float(np.max(np.abs(term))), max_terms)
    else:
        raise ValueError(f"unknown method {method!r}")
    residual = float(np.max(np.abs(V - beta * (P @ V) - U)))
    return ValueFunction(V, method, residual, iterations)


@dataclass(frozen=True)
class CCPOperator:
    """``A phi = phi - beta * sum_a p(a|x) E_f[phi(x')|x, a]``."""

    p: NDArray
    f: NDArray
    beta: float

    @property
    def policy(self) -> NDArray:
        return policy_matrix(self.p, self.f)

    @property
    def matrix(self) -> NDArray:
        return np.eye(self.p.shape[0]) - self.beta * self.policy

    def __call__(self, phi: NDArray) -> NDArray:
        return phi - self.beta * (self.policy @ phi)

    def solve(self, xi: NDArray) -> NDArray:
        return np.linalg.solve(self.matrix, xi)


def inf_norm(M: NDArray) -> float:
    """Induced sup norm (max absolute row sum); vectors get max |entry|."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return float(np.max(np.abs(M)))
    return float(np.max(np.abs(M).sum(axis=1)))


@dataclass(frozen=True)
class OperatorDiagnostics:
    norm_I_minus_A: float
    inv_norm: float
    inv_norm_bound: float
    relative_perturbation: float
    perturbation_bound: float
    amplification: float
    kress_bound: float | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def operator_norm_diagnostics(A: CCPOperator, A_hat: CCPOperator, xi=None, xi_hat=None,
                              phi=None) -> OperatorDiagnostics:
    """Sup-norm quantities behind the second-kind perturbation argument.

    ``perturbation_bound`` is ``beta/(1-beta) * sum_a max_x |p_hat - p|``, a
    closed-form ceiling on ``||A^{-1}(A_hat - A)||``. ``amplification`` is the
    factor ``||A^{-1}|| / (1 - ||A^{-1}(A_hat - A)||)`` (``inf`` when the
    perturbation is too large). ``kress_bound`` is filled when xi, xi_hat and
    phi are supplied.
    """
    if A.p.shape != A_hat.p.shape or A.f.shape != A_hat.f.shape:
        raise ModelValidationError("operators have different shapes", "A_hat")
    M, M_hat = A.matrix, A_hat.matrix
    A_inv = np.linalg.inv(M)
    beta = A.beta
    nIA = inf_norm(np.eye(M.shape[0]) - M)
    rel = inf_norm(A_inv @ (M_hat - M))
    inv = inf_norm(A_inv)
    amp = inv / (1.0 - rel) if rel < 1 else np.inf
    pb = beta / (1 - beta) * float(np.abs(A_hat.p - A.p).max(axis=0).sum())
    kb = None
    if xi is not None and xi_hat is not None and phi is not None:
        kb = kress_error_bound(A, A_hat, xi, xi_hat, phi)
    return OperatorDiagnostics(nIA, inv, 1.0 / (1.0 - nIA), rel, pb, amp, kb)


def kress_error_bound(A: CCPOperator, A_hat: CCPOperator, xi, xi_hat, phi) -> float:
    """Upper bound on ``||phi_hat - phi||`` where ``A_hat phi_hat = xi_hat``.

    Uses ``phi_hat - phi = A_hat^{-1}(xi_hat - A_hat phi)`` with
    ``||A_hat^{-1}|| <= ||A^{-1}|| / (1 - ||A^{-1}(A_hat - A)||)``, so the
    residual is ``xi_hat - xi - (A_hat - A) phi``.
    """
    M, M_hat = A.matrix, A_hat.matrix
    A_inv = np.linalg.inv(M)
    rel = inf_norm(A_inv @ (M_hat - M))
    if rel >= 1:
        raise BoundInapplicableError(f"||A^-1 (A_hat - A)|| = {rel:.3g} >= 1")
    phi = np.asarray(phi, dtype=float)
    resid = np.asarray(xi_hat, float) - np.asarray(xi, float) - (M_hat - M) @ phi
    return inf_norm(A_inv) / (1.0 - rel) * inf_norm(resid)
