"""First-stage nuisance estimation: CCPs, transition kernel and lambda.

Estimators are deliberately simple (smoothed cell frequencies and a ridge
multinomial logit) so that finite-sample bias has a known, controllable
source. ``eta_p`` / ``eta_f`` shrink the estimates toward uniform rows to
manufacture first-stage bias of a chosen size.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from .bellman import ValueFunction, policy_matrix, solve_value_ccp
from .exceptions import EstimationError, ReducibleChainError
from .model import ModelSpec
from .simulator import Dataset, ModelSolution
from .stationary import BackwardKernel, backward_kernel, solve_lambda, stationary_distribution
from .weights import WeightSpec

CCPMethod = Literal["frequency", "logit"]


@dataclass(frozen=True)
class FirstStageConfig:
    ccp_method: CCPMethod = "frequency"
    alpha_ccp: float = 0.5
    alpha_f: float = 0.1
    ridge: float = 1e-3
    fit_intercept: bool = True
    eta_p: float = 0.0
    eta_f: float = 0.0
    lambda_source: Literal["model", "empirical"] = "model"
    solver: Literal["direct", "neumann"] = "direct"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FirstStageConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown first-stage options: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class FoldAssignment:
    K: int
    fold_of: NDArray
    seed: int | None = None

    def indices(self, k: int) -> NDArray:
        return np.flatnonzero(self.fold_of == k)

    def complement(self, k: int) -> NDArray:
        return np.flatnonzero(self.fold_of != k)


@dataclass(frozen=True)
class NuisanceSet:
    """gamma = (p, f, lambda) plus the value function solved from (p, f)."""

    p: NDArray
    f: NDArray
    lam: NDArray
    value: ValueFunction
    utility: NDArray
    beta: float
    provenance: dict = field(default_factory=dict)

    @property
    def V(self) -> NDArray:
        return self.value.V

    def replace(self, **changes) -> "NuisanceSet":
        """Copy with some of p, f, lam swapped; V is re-solved if p or f change."""
        p = changes.get("p", self.p)
        f = changes.get("f", self.f)
        lam = changes.get("lam", self.lam)
        value = self.value
        if "p" in changes or "f" in changes:
            value = solve_value_ccp(p, f, self.utility, self.beta)
        return NuisanceSet(p, f, lam, value, self.utility, self.beta, dict(self.provenance))


def shrink_to_uniform(q: NDArray, eta: float) -> NDArray:
    """(1 - eta) q + eta * uniform along the last axis."""
    if eta == 0:
        return q
    return (1.0 - eta) * q + eta / q.shape[-1]


def make_folds(n: int, K: int, seed: int | None) -> FoldAssignment:
    if K < 1:
        raise ValueError("K must be at least 1")
    if K > n:
        raise ValueError(f"cannot split {n} records into {K} folds")
    perm = np.random.default_rng(np.random.SeedSequence(seed)).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % K
    return FoldAssignment(K, fold_of, seed)


# -- CCPs ------------------------------------------------------------------

def choice_counts(data: Dataset, n_states: int, n_actions: int) -> NDArray:
    counts = np.bincount(data.x * n_actions + data.a, minlength=n_states * n_actions)
    return counts.reshape(n_states, n_actions).astype(float)


def estimate_ccp(data: Dataset, n_states: int, n_actions: int, method: CCPMethod = "frequency",
                 alpha: float = 0.5, features: NDArray | None = None, ridge: float = 1e-3,
                 fit_intercept: bool = True, tol: float = 1e-8, max_iter: int = 200_000) -> NDArray:
    """Estimate p(a|x).

    ``"frequency"``: (count(x, a) + alpha) / (count(x) + J alpha).
    ``"logit"``: multinomial logit on state features with ridge penalty,
    fitted by gradient descent with backtracking line search.
    """
    counts = choice_counts(data, n_states, n_actions)
    if method == "frequency":
        tot = counts.sum(axis=1, keepdims=True) + n_actions * alpha
        empty = np.flatnonzero(tot[:, 0] <= 0)
        if empty.size:
            raise EstimationError("state never visited and no smoothing", state=int(empty[0]))
        return (counts + alpha) / tot
    if method == "logit":
        X = np.eye(n_states) if features is None else np.asarray(features, dtype=float)
        if fit_intercept:
            X = np.column_stack([np.ones(n_states), X])
        return _fit_multinomial_logit(X, counts, ridge, tol, max_iter)
    raise ValueError(f"unknown CCP method {method!r}")


def _softmax_rows(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _fit_multinomial_logit(X, counts, ridge, tol, max_iter):
    # loss(W) = -(1/n) sum_x sum_a C[x,a] log softmax(X W)[x,a] + ridge/2 ||W||^2
    n = counts.sum()
    if n <= 0:
        raise EstimationError("no observations for CCP logit")
    Nx = counts.sum(axis=1, keepdims=True)
    W = np.zeros((X.shape[1], counts.shape[1]))

    def loss_grad(W):
        Z = X @ W
        zmax = Z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(Z - zmax).sum(axis=1, keepdims=True)) + zmax
        loss = -(counts * (Z - lse)).sum() / n + 0.5 * ridge * (W * W).sum()
        P = np.exp(Z - lse)
        grad = X.T @ (Nx * P - counts) / n + ridge * W
        return loss, grad

    loss, grad = loss_grad(W)
    step = 1.0
    for _ in range(max_iter):
        gnorm2 = (grad * grad).sum()
        if np.sqrt(gnorm2) <= tol:
            break
        # Armijo backtracking from a Barzilai-Borwein trial step
        while True:
            W_new = W - step * grad
            loss_new, grad_new = loss_grad(W_new)
            if loss_new <= loss - 1e-4 * step * gnorm2 or step < 1e-16:
                break
            step *= 0.5
        s, y = W_new - W, grad_new - grad
        sy = (s * y).sum()
        step = (s * s).sum() / sy if sy > 0 else 2.0 * step
        W, loss, grad = W_new, loss_new, grad_new
    else:
        raise EstimationError(f"CCP logit did not reach gradient norm {tol:g}")
    return _softmax_rows(X @ W)


# -- transitions -------------------------------------------------------------

def estimate_transition(data: Dataset, n_states: int, n_actions: int,
                        alpha: float = 0.1) -> NDArray:
    """(count(x, a, x') + alpha) / (count(x, a) + S alpha).

    With ``alpha == 0`` unvisited (x, a) cells fall back to uniform rows.
    """
    S, J = n_states, n_actions
    flat = (data.x * J + data.a) * S + data.x_next
    counts = np.bincount(flat, minlength=S * J * S).reshape(S, J, S).astype(float)
    tot = counts.sum(axis=2, keepdims=True) + S * alpha
    f = np.where(tot > 0, (counts + alpha) / np.where(tot > 0, tot, 1.0), 1.0 / S)
    return f


# -- lambda ----------------------------------------------------------------

def estimate_lambda(p_hat: NDArray, f_hat: NDArray, w: WeightSpec | NDArray, beta: float,
                    data: Dataset | None = None, source: str = "model") -> tuple[NDArray, dict]:
    """Plug-in lambda = (I - beta B_hat)^{-1} w.

    ``source="model"`` takes pi_hat as the stationary law of the estimated
    chain; ``"empirical"`` uses the data's x-marginal and renormalizes the
    backward kernel rows. A reducible estimated chain falls back to the
    empirical marginal with a warning flag in the returned info.
    """
    w = w.w if isinstance(w, WeightSpec) else np.asarray(w, float)
    P = policy_matrix(p_hat, f_hat)
    info = {"lambda_source": source}
    if source == "model":
        try:
            stat = stationary_distribution(P)
            B = backward_kernel(P, stat)
            return solve_lambda(w, B, beta).lam, info
        except ReducibleChainError:
            if data is None:
                raise
            warnings.warn("estimated chain is reducible; using empirical state marginal")
            info = {"lambda_source": "empirical", "fallback": "reducible_estimated_chain"}
    elif source != "empirical":
        raise ValueError(f"unknown lambda source {source!r}")
    if data is None:
        raise ValueError("empirical lambda needs data")
    pi_hat = np.bincount(data.x, minlength=len(w)).astype(float)
    pi_hat /= pi_hat.sum()
    Bu = P.T * pi_hat[None, :]
    rows = Bu.sum(axis=1, keepdims=True)
    B = np.where(rows > 0, Bu / np.where(rows > 0, rows, 1.0), 1.0 / len(w))
    return solve_lambda(w, BackwardKernel(B), beta).lam, info


# -- assembling nuisance sets ---------------------------------------------------

def fit_nuisances(data: Dataset, model: ModelSpec, w: WeightSpec | NDArray,
                  config: FirstStageConfig = FirstStageConfig()) -> NuisanceSet:
    """Fit (p_hat, f_hat, lambda_hat) on ``data`` and solve V from (p_hat, f_hat)."""
    S, J = model.n_states, model.n_actions
    p = estimate_ccp(data, S, J, config.ccp_method, config.alpha_ccp, model.features,
                     config.ridge, config.fit_intercept)
    f = estimate_transition(data, S, J, config.alpha_f)
    p = shrink_to_uniform(p, config.eta_p)
    f = shrink_to_uniform(f, config.eta_f)
    lam, info = estimate_lambda(p, f, w, model.beta, data, config.lambda_source)
    value = solve_value_ccp(p, f, model.utility, model.beta, method=config.solver)
    prov = {"ccp": config.ccp_method, "transition": "frequency", **config.to_dict(), **info,
            "n_fit": data.n}
    return NuisanceSet(p, f, lam, value, model.utility, model.beta, prov)


def fit_folds(data: Dataset, model: ModelSpec, w: WeightSpec | NDArray, K: int = 5,
              seed: int | None = 0, config: FirstStageConfig = FirstStageConfig(),
              pooled: bool = False) -> tuple[FoldAssignment, list[NuisanceSet]]:
    """Cross-fitting: the k-th nuisance set is fitted on all folds but k.

    ``pooled=True`` (only with K=1) fits once on the whole sample; it is a
    diagnostic, not a valid cross-fitting scheme.
    """
    if K == 1:
        if not pooled:
            raise ValueError("cross-fitting requires K >= 2 (pass pooled=True for diagnostics)")
        folds = FoldAssignment(1, np.zeros(data.n, dtype=np.int64), seed)
        gamma = fit_nuisances(data, model, w, config)
        gamma.provenance["pooled"] = True
        return folds, [gamma]
    if K < 2:
        raise ValueError("K must be >= 2")
    folds = make_folds(data.n, K, seed)
    out = []
    for k in range(K):
        try:
            gamma = fit_nuisances(data.subset(folds.complement(k)), model, w, config)
        except EstimationError as exc:
            raise EstimationError(str(exc), fold=k, state=exc.state) from exc
        gamma.provenance["fold"] = k
        out.append(gamma)
    return folds, out


def oracle_nuisances(truth: ModelSolution, w: WeightSpec | NDArray) -> NuisanceSet:
    """The true gamma0 = (p0, f0, lambda0), with V solved by the CCP route."""
    m = truth.model
    value = solve_value_ccp(truth.ccp, m.kernel, m.utility, m.beta)
    return NuisanceSet(truth.ccp, m.kernel, truth.lam(w), value, m.utility, m.beta,
                       {"oracle": True})
