"""Weighting functions w(x) for the welfare target E[w(x) V(x)]."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .exceptions import ModelValidationError, SupportError
from .stationary import StationaryDistribution

SUPPORTED_KINDS = ("constant", "counterfactual")
UNSUPPORTED_KINDS = {
    "partial_effect": "average partial effects need derivatives of a continuous state density",
    "marginal_shift": "marginal shifts need derivatives of a continuous state density",
}


@dataclass(frozen=True)
class WeightSpec:
    kind: str
    w: NDArray
    mapping: Optional[NDArray] = None

    def to_config(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant"}
        return {"kind": "counterfactual", "map": [int(t) for t in self.mapping]}


def build_constant_weight(n_states: int) -> WeightSpec:
    return WeightSpec("constant", np.ones(int(n_states)))


def build_counterfactual_weight(mapping, stat: StationaryDistribution | NDArray) -> WeightSpec:
    """w(x) = pi_t(x)/pi(x) - 1 where pi_t is the law of t(X), X ~ pi.

    Then ``E_pi[w V] = E_pi[V(t(X)) - V(X)]`` for every V.
    """
    pi = stat.pi if isinstance(stat, StationaryDistribution) else np.asarray(stat, float)
    t = np.asarray(mapping)
    n = len(pi)
    if t.shape != (n,) or not np.issubdtype(t.dtype, np.integer):
        raise ModelValidationError(f"map must list one integer target per state ({n})", "map")
    if (t < 0).any() or (t >= n).any():
        raise ModelValidationError("map target out of range", f"map[{int(np.argmax((t < 0) | (t >= n)))}]")
    pi_t = np.bincount(t, weights=pi, minlength=n)
    bad = (pi <= 0) & (pi_t > 0)
    if bad.any():
        raise SupportError(f"pi vanishes where pi_t > 0 at states {np.flatnonzero(bad).tolist()}")
    w = np.where(pi > 0, pi_t / np.where(pi > 0, pi, 1.0), 0.0) - 1.0
    return WeightSpec("counterfactual", w, t.astype(np.int64))


def weight_from_config(cfg: dict, n_states: int, stat=None) -> WeightSpec:
    kind = cfg.get("kind", "constant")
    if kind == "constant":
        return build_constant_weight(n_states)
    if kind == "counterfactual":
        if stat is None:
            raise ValueError("counterfactual weights need the stationary distribution")
        return build_counterfactual_weight(np.asarray(cfg["map"], dtype=np.int64), stat)
    if kind in UNSUPPORTED_KINDS:
        raise ModelValidationError(f"{kind!r} is not supported: {UNSUPPORTED_KINDS[kind]}",
                                   "weight.kind")
    raise ModelValidationError(f"unknown weight kind {kind!r}", "weight.kind")
