"""Moment functions for weighted average welfare and their cross-fit average.

All moments are vectorized over records ``(x, a, x')``. Conditional
expectations ``E_f[V(x') | x, a]`` are exact sums against the nuisance
kernel. The orthogonal moment conditions the correction on the observed
action by default; ``conditioning="policy"`` averages it over actions with
the nuisance CCPs instead (see :func:`moment_orthogonal`).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.typing import NDArray

from .bellman import conditional_values, policy_matrix
from .exceptions import UnsupportedVariantError
from .first_stage import FoldAssignment, NuisanceSet
from .model import ModelSpec, expected_current_utility
from .simulator import Dataset, ModelSolution
from .stationary import stationary_distribution
from .weights import WeightSpec

Z_975 = 1.959963984540054
VARIANTS = ("plugin", "orthogonal", "orthogonal_policy", "alt_dr", "structural")
SE_FLOOR = 1e-12


def _w(w) -> NDArray:
    return w.w if isinstance(w, WeightSpec) else np.asarray(w, dtype=float)


def moment_plugin(data: Dataset, gamma: NuisanceSet, w) -> NDArray:
    """m = w(x) V(x; p, f)."""
    return _w(w)[data.x] * gamma.V[data.x]


def correction_term(data: Dataset, gamma: NuisanceSet,
                    conditioning: Literal["action", "policy"] = "action") -> NDArray:
    """beta * lambda(x) * (V(x') - E_f[V(x') | x, .])."""
    V = gamma.V
    fV = conditional_values(gamma.f, V)
    if conditioning == "action":
        cond = fV[data.x, data.a]
    elif conditioning == "policy":
        cond = (gamma.p * fV).sum(axis=1)[data.x]
    else:
        raise ValueError(f"unknown conditioning {conditioning!r}")
    return gamma.beta * gamma.lam[data.x] * (V[data.x_next] - cond)


def moment_orthogonal(data: Dataset, gamma: NuisanceSet, w,
                      conditioning: Literal["action", "policy"] = "action") -> NDArray:
    """m = w(x) V(x) + beta lambda(x) (V(x') - E_f[V(x') | x, a]).

    With ``conditioning="action"`` the conditional mean uses the observed
    action, so the correction has conditional mean zero at the true kernel
    for any CCPs and the moment is insensitive to p, f and lambda to first
    order. ``"policy"`` uses ``sum_a p(a|x) E_f[V|x, a]``; it is doubly
    robust in (f, lambda) at the true CCPs but keeps a first-order CCP term.
    """
    return moment_plugin(data, gamma, w) + correction_term(data, gamma, conditioning)


def _require_constant(w):
    wv = _w(w)
    if not np.all(wv == 1.0):
        raise UnsupportedVariantError("the alternative doubly robust moment requires w == 1")


def moment_orthogonal_alt_dr(data: Dataset, gamma: NuisanceSet, w=None) -> NDArray:
    """w == 1 form that needs no conditional expectation at evaluation time.

    m = V(x) + beta/(1-beta) V(x') - (V(x) - U~(x; p)) / (1-beta).
    """
    if w is not None:
        _require_constant(w)
    b = gamma.beta
    V = gamma.V
    U = expected_current_utility(gamma.utility, gamma.p)
    return V[data.x] + b / (1 - b) * V[data.x_next] - (V[data.x] - U[data.x]) / (1 - b)


def nuisance_stationary(gamma: NuisanceSet) -> NDArray:
    return stationary_distribution(policy_matrix(gamma.p, gamma.f)).pi


def g_delta(model: ModelSpec, gamma: NuisanceSet, pi: NDArray | None = None) -> NDArray:
    """Gradient of E_pi[w V] in the utility parameter delta at fixed CCPs.

    G = E_pi[lambda(x) sum_a p(a|x) d u(x, a; delta) / d delta]. For w == 1
    (lambda == 1/(1-beta)) this is E_pi[sum_a p du] / (1 - beta). ``pi``
    defaults to the stationary law of the nuisance chain.
    """
    phi = model.utility_features
    if phi is None:
        raise UnsupportedVariantError("model has no utility parameterization (phi missing)")
    if pi is None:
        pi = nuisance_stationary(gamma)
    inner = np.einsum("xa,xak->xk", gamma.p, phi)
    return (pi * gamma.lam) @ inner


def projection_factor(G: NDArray) -> float:
    """The scalar 1 - G^T (G^T G)^{-1} G; identically 0 for any G != 0."""
    G = np.atleast_1d(np.asarray(G, dtype=float))
    gg = float(G @ G)
    if gg == 0.0:
        raise ValueError("projection undefined for G == 0")
    return 1.0 - float(G @ G) / gg


def moment_structural_projected(data: Dataset, gamma: NuisanceSet, w, G) -> NDArray:
    """Orthogonal moment premultiplied by the delta-projection factor.

    For a scalar moment the factor collapses to 0 whenever G != 0, so the
    result is identically zero; callers should surface that degeneracy.
    """
    return projection_factor(G) * moment_orthogonal(data, gamma, w)


def evaluate_moment(variant: str, data: Dataset, gamma: NuisanceSet, w,
                    G: NDArray | None = None) -> NDArray:
    if variant == "plugin":
        return moment_plugin(data, gamma, w)
    if variant == "orthogonal":
        return moment_orthogonal(data, gamma, w, "action")
    if variant == "orthogonal_policy":
        return moment_orthogonal(data, gamma, w, "policy")
    if variant == "alt_dr":
        return moment_orthogonal_alt_dr(data, gamma, w)
    if variant == "structural":
        if G is None:
            raise UnsupportedVariantError("structural variant needs G")
        return moment_structural_projected(data, gamma, w, G)
    raise UnsupportedVariantError(f"unknown variant {variant!r}; choose from {VARIANTS}")


# -- population means by enumeration -------------------------------------------

def enumeration_records(truth: ModelSolution) -> tuple[Dataset, NDArray]:
    """Every (x, a, x') with its probability pi(x) p0(a|x) f0(x'|x, a)."""
    m = truth.model
    S, J = m.n_states, m.n_actions
    x, a, y = np.meshgrid(np.arange(S), np.arange(J), np.arange(S), indexing="ij")
    prob = truth.pi[:, None, None] * truth.ccp[:, :, None] * m.kernel
    return Dataset(x.ravel(), a.ravel(), y.ravel()), prob.ravel()


def population_mean(truth: ModelSolution, gamma: NuisanceSet, w, variant: str = "orthogonal",
                    G=None) -> float:
    """E[m(z; gamma)] under the true law of z, by full enumeration."""
    recs, prob = enumeration_records(truth)
    return float(prob @ evaluate_moment(variant, recs, gamma, w, G))


# -- cross-fit aggregation -----------------------------------------------------

@dataclass(frozen=True)
class MomentEvaluation:
    values: NDArray
    fold: NDArray
    variant: str


@dataclass(frozen=True)
class EstimateReport:
    theta_hat: float
    se: float
    ci_lo: float
    ci_hi: float
    variant: str
    n: int
    K: int
    seed: int | None = None
    nuisance_provenance: list = field(default_factory=list)
    degenerate_flags: list = field(default_factory=list)

    @property
    def ci_95(self) -> tuple[float, float]:
        return (self.ci_lo, self.ci_hi)

    def covers(self, theta: float) -> bool:
        return self.ci_lo <= theta <= self.ci_hi

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def evaluate_cross_fit(data: Dataset, folds: FoldAssignment, nuisances: Sequence[NuisanceSet],
                       variant: str, w, G=None) -> MomentEvaluation:
    if len(nuisances) != folds.K:
        raise ValueError(f"{len(nuisances)} nuisance sets for {folds.K} folds")
    values = np.empty(data.n)
    for k, gamma in enumerate(nuisances):
        idx = folds.indices(k)
        values[idx] = evaluate_moment(variant, data.subset(idx), gamma, w, G)
    return MomentEvaluation(values, folds.fold_of, variant)


def summarize_moments(values: NDArray, variant: str, K: int, seed=None, provenance=(),
                      flags=()) -> EstimateReport:
    """theta_hat = mean(m); se = sqrt(mean((m - theta_hat)^2) / N)."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if not np.isfinite(values).all():
        raise FloatingPointError("non-finite moment values")
    theta = float(values.mean())
    sigma2 = float(np.mean((values - theta) ** 2))
    se = float(np.sqrt(sigma2 / n))
    flags = list(flags)
    if np.unique(values).size < 2 or se < SE_FLOOR:
        flags.append("degenerate_variance")
        warnings.warn("moment values are (nearly) constant; standard error floored")
        se = max(se, SE_FLOOR)
    return EstimateReport(theta, se, theta - Z_975 * se, theta + Z_975 * se, variant, n, K,
                          seed, list(provenance), flags)


def cross_fit_estimate(data: Dataset, folds: FoldAssignment, nuisances: Sequence[NuisanceSet],
                       variant: str, w, G=None) -> EstimateReport:
    ev = evaluate_cross_fit(data, folds, nuisances, variant, w, G)
    flags = []
    if variant == "structural":
        flags.append("structural_projection_degenerate")
    if folds.K == 1:
        flags.append("pooled_fit_not_cross_fitted")
    return summarize_moments(ev.values, variant, folds.K, folds.seed,
                             [g.provenance for g in nuisances], flags)
