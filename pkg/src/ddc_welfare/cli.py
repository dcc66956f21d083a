"""Command-line front end: ``ddc-welfare {simulate,estimate,diagnose,coverage}``.

Every command reads one JSON config, writes into a fresh output directory
and records a ``manifest.json`` there before any result file. Result files
never contain timestamps, so identical configs give identical bytes.

Exit codes: 0 ok, 1 acceptance check failed, 2 config error, 3 estimation
or numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from .diagnostics import (ExperimentConfig, dumps, model_from_config, run_coverage_suite,
                          run_diagnose_suite)
from .estimator import VARIANTS, cross_fit_estimate, g_delta
from .exceptions import DDCError, ModelValidationError, UnsupportedVariantError
from .first_stage import FirstStageConfig, fit_folds, make_folds, oracle_nuisances
from .model import ModelSpec
from .simulator import MODES, Dataset, simulate, solve_truth
from .weights import weight_from_config

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_ESTIMATION = 0, 1, 2, 3
MANIFEST = "manifest.json"


class ConfigError(Exception):
    """Bad config or arguments; ``path`` names the offending field."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def tool_version() -> str:
    try:
        return metadata.version("ddc-welfare")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# -- config ----------------------------------------------------------------------

RUN_FIELDS = ("model", "weight", "seed", "n", "mode", "K", "variants", "first_stage",
              "experiment")


@dataclass(frozen=True)
class RunConfig:
    """Top-level config shared by all subcommands.

    ``model`` is either a generator spec (``{"kind": "reference"}``,
    ``{"kind": "random", "seed": 3}``) or a full serialized model document.
    ``experiment`` holds diagnose/coverage settings; it inherits ``model``,
    ``weight`` and ``seed`` unless it sets them itself.
    """

    model: dict = field(default_factory=lambda: {"kind": "reference"})
    weight: dict = field(default_factory=lambda: {"kind": "constant"})
    seed: int = 12345
    n: int = 2000
    mode: str = "iid"
    K: int = 5
    variants: tuple = ("orthogonal",)
    first_stage: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"model": self.model, "weight": self.weight, "seed": self.seed, "n": self.n,
                "mode": self.mode, "K": self.K, "variants": list(self.variants),
                "first_stage": dict(self.first_stage), "experiment": dict(self.experiment)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        extra = sorted(set(d) - set(RUN_FIELDS))
        if extra:
            raise ConfigError(f"unknown field(s) {extra}", extra[0])
        d = dict(d)
        if "variants" in d:
            if isinstance(d["variants"], str):
                d["variants"] = [d["variants"]]
            d["variants"] = tuple(d["variants"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("must be a non-negative integer", "seed")
        if not isinstance(self.n, int) or self.n < 1:
            raise ConfigError("must be a positive integer", "n")
        if self.mode not in MODES:
            raise ConfigError(f"must be one of {MODES}", "mode")
        for i, v in enumerate(self.variants):
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}", f"variants[{i}]")
        try:
            FirstStageConfig.from_dict(self.first_stage)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "first_stage") from exc

    def build_model(self) -> ModelSpec:
        cfg = self.model
        if "n_states" in cfg or "utilities" in cfg:
            cfg = {"kind": "explicit", "spec": cfg}
        try:
            return model_from_config(cfg)
        except ModelValidationError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1] if exc.path else str(exc),
                              f"model.{exc.path}" if exc.path else "model") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "model") from exc

    def build_weight(self, model: ModelSpec, stationary):
        try:
            return weight_from_config(self.weight, model.n_states, stationary)
        except ModelValidationError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1] if exc.path else str(exc),
                              exc.path or "weight") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "weight") from exc

    def experiment_config(self) -> ExperimentConfig:
        d = {"model": self.model, "weight": self.weight, "seed": self.seed, "K": self.K,
             **self.experiment}
        if "n_states" in d["model"] or "utilities" in d["model"]:
            d["model"] = {"kind": "explicit", "spec": d["model"]}
        try:
            return ExperimentConfig.from_dict(d)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc), "experiment") from exc

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    return RunConfig.from_dict(raw)


# -- manifest and write-once outputs ------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_hash: str
    tool_version: str
    master_seed: int
    inputs: dict
    outputs: list
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    status: str = "running"
    finished: str | None = None

    def to_dict(self) -> dict:
        return {"command": self.command, "config_hash": self.config_hash,
                "tool_version": self.tool_version, "master_seed": self.master_seed,
                "inputs": self.inputs, "outputs": self.outputs, "started": self.started,
                "status": self.status, "finished": self.finished}


def atomic_write(path: Path, data: bytes | str, overwrite: bool = False) -> None:
    """Write via a temp file and rename; refuses to replace unless ``overwrite``."""
    if isinstance(data, str):
        data = data.encode()
    path = Path(path)
    if path.exists() and not overwrite:
        raise ConfigError(f"refusing to overwrite {path}", "--out")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class OutputDir:
    """Output directory guard: planned files must not exist yet."""

    def __init__(self, out, command, cfg: RunConfig, inputs: dict, names: list[str]):
        self.root = Path(out)
        self.root.mkdir(parents=True, exist_ok=True)
        clash = [n for n in [MANIFEST, *names] if (self.root / n).exists()]
        if clash:
            raise ConfigError(f"output already exists: {self.root / clash[0]}", "--out")
        self.manifest = RunManifest(command, cfg.config_hash(), tool_version(), cfg.seed,
                                    inputs, sorted(names))
        self._flush_manifest()

    def _flush_manifest(self):
        atomic_write(self.root / MANIFEST, dumps(self.manifest.to_dict()), overwrite=True)

    def path(self, name) -> Path:
        return self.root / name

    def write(self, name, text) -> None:
        atomic_write(self.root / name, text)

    def close(self, status: str) -> None:
        self.manifest.status = status
        self.manifest.finished = datetime.now(timezone.utc).isoformat()
        self._flush_manifest()


def _stamp(obj: dict, cfg: RunConfig) -> dict:
    return {**obj, "manifest": MANIFEST, "config_hash": cfg.config_hash()}


# -- commands ---------------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig) -> int:
    model = cfg.build_model()
    names = ["data.csv", "data.meta.json", "config.json"]
    out = OutputDir(args.out, "simulate", cfg, {"config": str(args.config)}, names)
    data = simulate(model, cfg.n, cfg.seed, cfg.mode)
    data.write(out.path("data.csv"))
    out.write("config.json", dumps(cfg.to_dict()))
    out.close("ok")
    return EXIT_OK


def _structural_G(model, nuisances):
    return np.mean([g_delta(model, g) for g in nuisances], axis=0)


def cmd_estimate(args, cfg: RunConfig) -> int:
    model = cfg.build_model()
    K = cfg.K
    if K == 1 and not args.pooled_diagnostic:
        raise ConfigError("cross-fitting requires K >= 2 (use --pooled-diagnostic for K=1)",
                          "K")
    if K < 1:
        raise ConfigError("must be >= 1", "K")
    try:
        data = Dataset.from_csv(args.data)
        data.check_ranges(model.n_states, model.n_actions)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc), "--data") from exc
    truth = solve_truth(model)
    w = cfg.build_weight(model, truth.stationary)
    if "alt_dr" in cfg.variants and not np.all(w.w == 1.0):
        raise ConfigError("alt_dr requires the constant weight", "variants")
    if "structural" in cfg.variants and model.utility_features is None:
        raise ConfigError("structural needs a parameterized utility (utility_features)",
                          "variants")
    fs = FirstStageConfig.from_dict(cfg.first_stage)
    names = [f"estimate_{v}.json" for v in cfg.variants]
    out = OutputDir(args.out, "estimate", cfg,
                    {"config": str(args.config), "data": str(args.data)}, names)
    try:
        if args.oracle_nuisances:
            folds = make_folds(data.n, K, cfg.seed)
            nuisances = [oracle_nuisances(truth, w)] * K
        else:
            folds, nuisances = fit_folds(data, model, w, K, cfg.seed, fs, pooled=K == 1)
        for v in cfg.variants:
            G = _structural_G(model, nuisances) if v == "structural" else None
            rep = cross_fit_estimate(data, folds, nuisances, v, w, G)
            out.write(f"estimate_{v}.json", dumps(_stamp(rep.to_dict(), cfg)))
    except DDCError:
        out.close("estimation_error")
        raise
    out.close("ok")
    return EXIT_OK


SUITE_OUTPUTS = {
    "diagnose": ["orthogonality.csv", "double_robustness.csv", "lemma_suite.csv",
                 "population_identity.csv"],
    "coverage": ["coverage.csv"],
}


def _suite_command(args, cfg: RunConfig, name: str, runner) -> int:
    model = cfg.build_model()  # model errors become config errors before any output
    cfg.build_weight(model, solve_truth(model).stationary)
    exp = cfg.experiment_config()
    csv_names = SUITE_OUTPUTS[name]
    out = OutputDir(args.out, name, cfg, {"config": str(args.config)},
                    [f"{name}.json", *csv_names])
    try:
        result = runner(exp)
    except DDCError:
        out.close("estimation_error")
        raise
    for fname in csv_names:
        out.write(fname, result["csv"][fname])
    out.write(f"{name}.json", dumps(_stamp(result["summary"], cfg)))
    passed = result["summary"]["passed"]
    out.close("ok" if passed else "check_failed")
    for c in result["summary"]["checks"]:
        label = c.get("check") or ":".join(str(c[k]) for k in ("kind", "variant") if k in c)
        tag = "info" if c.get("informational") else ("PASS" if c["passed"] else "FAIL")
        print(f"{tag:4s} {label}", file=sys.stderr)
    return EXIT_OK if passed else EXIT_CHECK


def cmd_diagnose(args, cfg: RunConfig) -> int:
    return _suite_command(args, cfg, "diagnose", run_diagnose_suite)


def cmd_coverage(args, cfg: RunConfig) -> int:
    return _suite_command(args, cfg, "coverage",
                          lambda exp: run_coverage_suite(exp, workers=args.threads))


# -- argument parsing ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddc-welfare",
                                     description="Orthogonal welfare estimation for dynamic "
                                                 "discrete choice models.")
    parser.add_argument("--version", action="version", version=tool_version())
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", required=True, help="output directory (files are write-once)")
        p.add_argument("--seed", type=int, help="override the config's master seed")

    p = sub.add_parser("simulate", help="draw a dataset from the configured model")
    common(p)
    p.add_argument("--n", type=int, help="override the sample size")

    p = sub.add_parser("estimate", help="cross-fit estimate of weighted welfare")
    common(p)
    p.add_argument("--data", required=True, help="dataset CSV (x,a,x_next)")
    p.add_argument("--variant", action="append", choices=VARIANTS,
                   help="moment variant; repeat for several reports")
    p.add_argument("--folds", type=int, help="number of cross-fitting folds K")
    p.add_argument("--pooled-diagnostic", action="store_true",
                   help="allow K=1 (no cross-fitting; diagnostic only)")
    p.add_argument("--oracle-nuisances", action="store_true",
                   help="use the true nuisances of the configured model")

    for name, helptext in (("diagnose", "run the enumeration checks"),
                           ("coverage", "run the Monte Carlo coverage study")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes (results do not depend on it)")
    return parser


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    d = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "n", None) is not None:
        d["n"] = args.n
    if getattr(args, "variant", None):
        d["variants"] = args.variant
    if getattr(args, "folds", None) is not None:
        d["K"] = args.folds
    return RunConfig.from_dict(d)


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "diagnose": cmd_diagnose,
            "coverage": cmd_coverage}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "threads", 1) < 1:
            raise ConfigError("must be >= 1", "--threads")
        cfg = apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnsupportedVariantError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DDCError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
