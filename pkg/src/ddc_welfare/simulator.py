"""Simulation of (x, a, x') records from the stationary controlled process.

Random numbers come from numpy's PCG64 seeded through ``SeedSequence``; each
replication gets its own spawned stream so results never depend on the order
in which replications are run.
"""

from __future__ import annotations

import gzip
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from .bellman import ValueFunction, choice_specific_values, policy_matrix, solve_value_emax
from .model import ModelSpec, ccp_from_values
from .stationary import (StationaryDistribution, backward_kernel, solve_lambda,
                         stationary_distribution)
from .weights import WeightSpec

RNG_ALGORITHM = "numpy.random.PCG64 via SeedSequence"

Mode = Literal["iid", "path"]
MODES = ("iid", "path")


@dataclass(frozen=True)
class ModelSolution:
    """Exact population objects of a model: V, CCPs, policy chain and pi."""

    model: ModelSpec
    value: ValueFunction
    v: NDArray
    ccp: NDArray
    policy: NDArray
    stationary: StationaryDistribution

    @property
    def V(self) -> NDArray:
        return self.value.V

    @property
    def pi(self) -> NDArray:
        return self.stationary.pi

    def lam(self, w: WeightSpec | NDArray) -> NDArray:
        w = w.w if isinstance(w, WeightSpec) else np.asarray(w, float)
        B = backward_kernel(self.policy, self.stationary)
        return solve_lambda(w, B, self.model.beta).lam


def solve_truth(model: ModelSpec, tol: float = 1e-12) -> ModelSolution:
    value = solve_value_emax(model, tol=tol)
    v = choice_specific_values(model, value)
    p = ccp_from_values(v)
    P = policy_matrix(p, model.kernel)
    return ModelSolution(model, value, v, p, P, stationary_distribution(P))


@dataclass(frozen=True)
class Dataset:
    x: NDArray
    a: NDArray
    x_next: NDArray
    seed: int | None = None
    mode: str = "iid"
    model_hash: str | None = None

    def __post_init__(self):
        for name in ("x", "a", "x_next"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.x) == len(self.a) == len(self.x_next)):
            raise ValueError("x, a and x_next must have equal length")

    @property
    def n(self) -> int:
        return len(self.x)

    def __len__(self) -> int:
        return self.n

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.a[idx], self.x_next[idx], self.seed, self.mode,
                       self.model_hash)

    def check_ranges(self, n_states: int, n_actions: int) -> None:
        for name, arr, hi in (("x", self.x, n_states), ("a", self.a, n_actions),
                              ("x_next", self.x_next, n_states)):
            bad = (arr < 0) | (arr >= hi)
            if bad.any():
                i = int(np.argmax(bad))
                raise ValueError(f"row {i}: {name}={arr[i]} outside [0, {hi})")

    def metadata(self) -> dict:
        return {"seed": self.seed, "n": self.n, "mode": self.mode,
                "model_hash": self.model_hash, "rng": RNG_ALGORITHM}

    def to_csv(self, path) -> None:
        """Write ``x,a,x_next`` rows; a ``.gz`` suffix gzips with a fixed mtime."""
        buf = io.StringIO()
        buf.write("x,a,x_next\n")
        np.savetxt(buf, np.column_stack([self.x, self.a, self.x_next]), fmt="%d", delimiter=",")
        data = buf.getvalue().encode()
        path = Path(path)
        if path.suffix == ".gz":
            with open(path, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0,
                                                       filename="") as gz:
                gz.write(data)
        else:
            path.write_bytes(data)

    def write(self, path) -> Path:
        """CSV plus a ``<name>.meta.json`` sidecar; returns the sidecar path."""
        path = Path(path)
        self.to_csv(path)
        side = sidecar_path(path)
        side.write_text(json.dumps(self.metadata(), sort_keys=True, indent=2) + "\n")
        return side

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rt") as fh:
            header = fh.readline().strip()
            if header != "x,a,x_next":
                raise ValueError(f"{path}: expected header 'x,a,x_next', got {header!r}")
            arr = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
        if arr.size == 0:
            arr = np.zeros((0, 3), dtype=np.int64)
        meta = {}
        side = sidecar_path(path)
        if side.exists():
            meta = json.loads(side.read_text())
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], meta.get("seed"), meta.get("mode", "iid"),
                   meta.get("model_hash"))


def sidecar_path(path) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (".gz", ".csv"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return path.with_name(name + ".meta.json")


def draw_categorical(rng: np.random.Generator, probs: NDArray) -> NDArray:
    """One draw per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])
    idx = (cdf < u[:, None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def burn_in_length(beta: float) -> int:
    # round first: 1/(1-0.9) is 10.000000000000002 in binary floating point
    return 10 * math.ceil(round(1.0 / (1.0 - beta), 9))


def simulate(model: ModelSpec | ModelSolution, n: int, seed: int, mode: Mode = "iid",
             rng: np.random.Generator | None = None) -> Dataset:
    """Draw ``n`` records.

    ``"iid"`` draws x ~ pi exactly, then a ~ p0(.|x) and x' ~ f0(.|x, a).
    ``"path"`` runs one chain from a uniform start, discards
    ``10 * ceil(1/(1-beta))`` steps, and records consecutive transitions.
    """
    if n <= 0:
        raise ValueError(f"sample size must be positive, got {n}")
    if mode not in MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    truth = model if isinstance(model, ModelSolution) else solve_truth(model)
    m = truth.model
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
    p, f = truth.ccp, m.kernel
    if mode == "iid":
        x = draw_categorical(rng, np.broadcast_to(truth.pi, (n, m.n_states)))
        a = draw_categorical(rng, p[x])
        x_next = draw_categorical(rng, f[x, a])
    else:
        total = burn_in_length(m.beta) + n
        ua = rng.random(total)
        ux = rng.random(total)
        cp = np.cumsum(p, axis=1)
        cf = np.cumsum(f, axis=2)
        states = np.empty(total + 1, dtype=np.int64)
        actions = np.empty(total, dtype=np.int64)
        s = int(rng.integers(m.n_states))
        states[0] = s
        J, S = m.n_actions - 1, m.n_states - 1
        for t in range(total):
            a_t = min(int(np.searchsorted(cp[s], ua[t], side="right")), J)
            s = min(int(np.searchsorted(cf[s, a_t], ux[t], side="right")), S)
            actions[t] = a_t
            states[t + 1] = s
        b = total - n
        x, a, x_next = states[b:total], actions[b:], states[b + 1:]
    return Dataset(x, a, x_next, seed, mode, m.content_hash())


def true_theta(model: ModelSpec | ModelSolution, w: WeightSpec | NDArray) -> float:
    """theta0 = sum_x pi(x) w(x) V(x) at the emax solution."""
    truth = model if isinstance(model, ModelSolution) else solve_truth(model)
    w = w.w if isinstance(w, WeightSpec) else np.asarray(w, float)
    return float(np.dot(truth.pi, w * truth.V))
