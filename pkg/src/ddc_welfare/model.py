"""Model primitives and closed-form logit quantities.

A finite-state dynamic discrete choice model is described by per-period
utilities ``u[x, a]``, a transition kernel ``f[x, a, x']``, a discount factor
``beta`` and i.i.d. type-1 extreme value shocks. Everything in this module is
pure: arrays stored on a :class:`ModelSpec` are made read-only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import DomainError, ModelValidationError

EULER_GAMMA = 0.5772156649015329
SHOCK_FAMILY = "iid_extreme_value_type1"

PROB_CLIP = 1e-9
SIMPLEX_TOL = 1e-12


def _frozen(a: ArrayLike, dtype=float) -> NDArray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StateSpace:
    n_states: int
    features: NDArray
    labels: Optional[tuple] = None

    def __post_init__(self):
        if self.n_states < 2:
            raise ModelValidationError("need at least 2 states", "n_states")
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim == 1:
            feats = feats[:, None]
        if feats.ndim != 2 or feats.shape[0] != self.n_states or feats.shape[1] < 1:
            raise ModelValidationError(
                f"expected shape ({self.n_states}, d>=1), got {feats.shape}", "features"
            )
        object.__setattr__(self, "features", _frozen(feats))
        if self.labels is not None:
            if len(self.labels) != self.n_states:
                raise ModelValidationError("one label per state required", "labels")
            object.__setattr__(self, "labels", tuple(self.labels))

    @classmethod
    def one_hot(cls, n_states: int) -> "StateSpace":
        return cls(n_states, np.eye(n_states))


def check_kernel(f: ArrayLike, n_states: int, n_actions: int, tol: float = SIMPLEX_TOL) -> NDArray:
    """Validate a transition kernel and return it as a float array.

    Raises :class:`ModelValidationError` naming the first bad ``kernel[x][a]``.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (n_states, n_actions, n_states):
        raise ModelValidationError(
            f"expected shape {(n_states, n_actions, n_states)}, got {f.shape}", "kernel"
        )
    bad = ~np.isfinite(f) | (f < 0)
    if bad.any():
        x, a, y = np.argwhere(bad)[0]
        raise ModelValidationError("entry negative or non-finite", f"kernel[{x}][{a}][{y}]")
    dev = np.abs(f.sum(axis=2) - 1.0)
    if (dev > tol).any():
        x, a = np.argwhere(dev > tol)[0]
        raise ModelValidationError(
            f"row sums to {f[x, a].sum():.15g}, not 1", f"kernel[{x}][{a}]"
        )
    return f


def check_ccp(p: ArrayLike, n_states: int | None = None, n_actions: int | None = None,
              tol: float = SIMPLEX_TOL, interior: float | None = None) -> NDArray:
    """Validate a CCP matrix (rows are pmfs over actions).

    If ``interior`` is given, also require ``interior <= p <= 1 - interior``.
    """
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ModelValidationError(f"expected (n_states, J>=2), got {p.shape}", "ccp")
    if n_states is not None and p.shape[0] != n_states:
        raise ModelValidationError(f"expected {n_states} rows, got {p.shape[0]}", "ccp")
    if n_actions is not None and p.shape[1] != n_actions:
        raise ModelValidationError(f"expected {n_actions} columns, got {p.shape[1]}", "ccp")
    bad = ~np.isfinite(p) | (p < 0)
    if bad.any():
        x, a = np.argwhere(bad)[0]
        raise ModelValidationError("entry negative or non-finite", f"ccp[{x}][{a}]")
    dev = np.abs(p.sum(axis=1) - 1.0)
    if (dev > tol).any():
        x = int(np.argmax(dev))
        raise ModelValidationError(f"row sums to {p[x].sum():.15g}", f"ccp[{x}]")
    if interior is not None:
        out = (p < interior) | (p > 1 - interior)
        if out.any():
            x, a = np.argwhere(out)[0]
            raise ModelValidationError(f"not in [{interior}, 1-{interior}]", f"ccp[{x}][{a}]")
    return p


@dataclass(frozen=True)
class ModelSpec:
    """Primitives of a finite-state DDC model with logit shocks.

    Attributes:
        utility: per-period structural utility, shape (S, J).
        kernel: f(x'|x,a), shape (S, J, S).
        beta: discount factor in (0, 1).
        states: state space (features default to one-hot).
        utility_features: optional phi(x, a, k) with ``utility == phi @ delta``.
        delta: optional structural parameter matching ``utility_features``.
    """

    utility: NDArray
    kernel: NDArray
    beta: float
    states: Optional[StateSpace] = None
    utility_features: Optional[NDArray] = None
    delta: Optional[NDArray] = None
    shock_family: str = SHOCK_FAMILY

    def __post_init__(self):
        u = np.asarray(self.utility, dtype=float)
        if u.ndim != 2:
            raise ModelValidationError(f"expected 2-d array, got shape {u.shape}", "utilities")
        S, J = u.shape
        if S < 2:
            raise ModelValidationError("need at least 2 states", "n_states")
        if J < 2:
            raise ModelValidationError("need at least 2 actions", "n_actions")
        if not np.isfinite(u).all():
            x, a = np.argwhere(~np.isfinite(u))[0]
            raise ModelValidationError("non-finite utility", f"utilities[{x}][{a}]")
        beta = float(self.beta)
        if not 0.0 < beta < 1.0:
            raise ModelValidationError(f"discount must lie in (0, 1), got {beta}", "beta")
        f = check_kernel(self.kernel, S, J)
        if self.shock_family != SHOCK_FAMILY:
            raise ModelValidationError(f"unsupported shock family {self.shock_family!r}",
                                       "shock_family")
        states = self.states if self.states is not None else StateSpace.one_hot(S)
        if states.n_states != S:
            raise ModelValidationError("state space size disagrees with utilities", "features")
        if (self.utility_features is None) != (self.delta is None):
            raise ModelValidationError("utility_features and delta must be given together",
                                       "utility_features")
        if self.utility_features is not None:
            phi = np.asarray(self.utility_features, dtype=float)
            delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
            if phi.ndim != 3 or phi.shape[:2] != (S, J) or phi.shape[2] != delta.size:
                raise ModelValidationError(
                    f"expected shape ({S}, {J}, {delta.size}), got {phi.shape}",
                    "utility_features")
            if not np.allclose(phi @ delta, u, rtol=0, atol=1e-12):
                raise ModelValidationError("utilities differ from phi @ delta", "utilities")
            object.__setattr__(self, "utility_features", _frozen(phi))
            object.__setattr__(self, "delta", _frozen(delta))
        object.__setattr__(self, "utility", _frozen(u))
        object.__setattr__(self, "kernel", _frozen(f))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "states", states)

    @property
    def n_states(self) -> int:
        return self.utility.shape[0]

    @property
    def n_actions(self) -> int:
        return self.utility.shape[1]

    @property
    def features(self) -> NDArray:
        return self.states.features

    @classmethod
    def from_parameters(cls, utility_features, delta, kernel, beta, **kw) -> "ModelSpec":
        """Build a model whose utilities are ``utility_features @ delta``."""
        phi = np.asarray(utility_features, dtype=float)
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        return cls(phi @ delta, kernel, beta, utility_features=phi, delta=delta, **kw)

    def with_delta(self, delta) -> "ModelSpec":
        if self.utility_features is None:
            raise ModelValidationError("model has no utility parameterization",
                                       "utility_features")
        return ModelSpec.from_parameters(self.utility_features, delta, self.kernel, self.beta,
                                         states=self.states)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "beta": self.beta,
            "utilities": self.utility.tolist(),
            "kernel": self.kernel.tolist(),
            "features": self.features.tolist(),
        }
        if self.utility_features is not None:
            d["utility_features"] = self.utility_features.tolist()
            d["delta"] = self.delta.tolist()
        if self.states.labels is not None:
            d["labels"] = list(self.states.labels)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        for key in ("n_states", "n_actions", "beta", "utilities", "kernel"):
            if key not in d:
                raise ModelValidationError("missing field", key)
        S, J = int(d["n_states"]), int(d["n_actions"])
        if S < 2:
            raise ModelValidationError("need at least 2 states", "n_states")
        if J < 2:
            raise ModelValidationError("need at least 2 actions", "n_actions")
        u = _ragged_check(d["utilities"], (S, J), "utilities")
        f = _ragged_check(d["kernel"], (S, J, S), "kernel")
        feats = d.get("features")
        feats = np.eye(S) if feats is None else np.asarray(feats, dtype=float)
        states = StateSpace(S, feats, d.get("labels"))
        phi = d.get("utility_features")
        delta = d.get("delta")
        return cls(u, f, d["beta"], states=states,
                   utility_features=None if phi is None else np.asarray(phi, dtype=float),
                   delta=None if delta is None else np.asarray(delta, dtype=float))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))

    def content_hash(self) -> str:
        """SHA-256 of the canonical JSON encoding."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _ragged_check(obj, shape: Sequence[int], name: str) -> NDArray:
    """Walk a nested list and report the first index with the wrong length."""

    def walk(node, depth, path):
        if depth == len(shape):
            return
        if not isinstance(node, (list, tuple)) or len(node) != shape[depth]:
            got = len(node) if isinstance(node, (list, tuple)) else type(node).__name__
            raise ModelValidationError(f"expected length {shape[depth]}, got {got}",
                                       name + "".join(f"[{i}]" for i in path))
        for i, child in enumerate(node):
            walk(child, depth + 1, path + [i])

    walk(obj, 0, [])
    return np.asarray(obj, dtype=float)


# -- logit closed forms ------------------------------------------------------

def _finite_values(values, name="values") -> NDArray:
    v = np.asarray(values, dtype=float)
    if v.ndim == 0 or v.shape[-1] < 2:
        raise DomainError(f"{name} must have at least 2 actions along the last axis")
    if not np.isfinite(v).all():
        raise DomainError(f"{name} contain non-finite entries")
    return v


def emax_logit(values: ArrayLike) -> NDArray | float:
    """E max_a (v_a + eps_a) under i.i.d. EV1 shocks: logsumexp(v) + Euler's gamma.

    Works row-wise on the last axis; a 1-d input returns a float.
    """
    v = _finite_values(values)
    vmax = v.max(axis=-1, keepdims=True)
    out = np.log(np.exp(v - vmax).sum(axis=-1)) + vmax[..., 0] + EULER_GAMMA
    return float(out) if out.ndim == 0 else out


def ccp_from_values(values: ArrayLike) -> NDArray:
    """Logit choice probabilities (softmax over the last axis)."""
    v = _finite_values(values)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def clip_probabilities(p: ArrayLike, eps: float = PROB_CLIP) -> NDArray:
    return np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)


def expected_shock_logit(p: ArrayLike, clip: bool = True) -> NDArray:
    """E[eps_a | a optimal] = gamma - log p(a|x) for logit shocks.

    With ``clip=False`` a zero probability raises :class:`DomainError`.
    """
    p = np.asarray(p, dtype=float)
    if clip:
        p = clip_probabilities(p)
    elif (p <= 0).any():
        raise DomainError("zero choice probability; expected shock is unbounded")
    return EULER_GAMMA - np.log(p)


def expected_current_utility(utility, p: ArrayLike, clip: bool = True) -> NDArray:
    """U~(x; p) = sum_a p(a|x) (u(x, a) + gamma - log p(a|x)).

    ``utility`` is a (S, J) array or a :class:`ModelSpec`. Terms with
    ``p(a|x) == 0`` contribute exactly 0.
    """
    u = utility.utility if isinstance(utility, ModelSpec) else np.asarray(utility, dtype=float)
    p = np.asarray(p, dtype=float)
    if p.shape != u.shape:
        raise ModelValidationError(f"ccp shape {p.shape} != utility shape {u.shape}", "ccp")
    terms = np.where(p > 0, p * (u + expected_shock_logit(p, clip=clip)), 0.0)
    return terms.sum(axis=-1)
