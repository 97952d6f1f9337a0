"""Flat ``section.key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Lists are comma-separated;
experiment levels are written ``n_cells:N`` (for example
``experiment.levels = 16:32, 32:64, 64:128``). Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

from .harness import ExperimentPlan, InitialCondition, ModelConfig, select_parameters_2d, select_radius_1d
from .scheme import SchemeParams


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _float_list(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _levels(s):
    out = []
    for item in s.split(","):
        if not item.strip():
            continue
        n, N = item.split(":")
        out.append((int(n), int(N)))
    return tuple(out)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _float(s):
    return float(s)


# key -> (parser, default)
SCHEMA = {
    "model.dimension": (int, 1),
    "model.lengths": (_float_list, None),
    "model.T": (_float, 1.0),
    "model.kappa1": (_float, 1.0),
    "model.kappa2": (_float, 1.0),
    "model.gamma": (_float, 1.0),
    "model.mu": (_float, 1.0),
    "model.epsilon": (_float, 0.0),
    "initial.kind": (str, "cosine"),
    "initial.amplitude": (_float, 0.2),
    "initial.value": (_float_list, (1.0, 0.0, 0.0)),
    "noise.modes": (int, 4),
    "noise.decay": (_float, 4.0),
    "noise.sigma": (_float, 0.5),
    "noise.seed": (int, 0),
    "discretisation.n_cells": (int, 32),
    "discretisation.N": (int, 64),
    "solver.method": (str, "auto"),
    "solver.tol": (_float, 1e-10),
    "stopping.mode": (str, "none"),
    "stopping.R": (_float, math.inf),
    "stopping.q": (_float, 0.5),
    "stopping.beta": (_float, 0.5),
    "stopping.alpha": (_float, 0.45),
    "stopping.c_star": (_float, 1.0),
    "experiment.levels": (_levels, ((16, 32), (32, 64), (64, 128))),
    "experiment.paths": (int, 4),
    "experiment.gamma": (_float, 1.0),
    "experiment.reference": (int, -1),
    "epsilon_study.eps": (_float_list, (0.1, 0.05, 0.025)),
    "epsilon_study.n_modes": (int, 16),
    "epsilon_study.N": (int, 256),
    "epsilon_study.paths": (int, 10),
    "epsilon_study.substeps": (int, 1),
    "output.dir": (str, "out"),
    "output.fields": (_bool, False),
    "output.field_every": (int, 1),
}

# keys that change where things go, never what is computed
_NOT_DIGESTED = {"output.dir"}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["noise.seed"]

    @property
    def c_star(self) -> float:
        return self.values["stopping.c_star"]

    @property
    def dimension(self) -> int:
        return self.values["model.dimension"]

    def digest(self) -> str:
        items = sorted((k, v) for k, v in self.values.items() if k not in _NOT_DIGESTED)
        text = "\n".join(f"{k}={v!r}" for k, v in items)
        return hashlib.sha256(text.encode()).hexdigest()

    def header(self, version: str) -> str:
        return f"# sllb {version} config={self.digest()[:16]} seed={self.seed} c_star={self.c_star:.17g}"

    # --- derived objects ---
    def model(self) -> ModelConfig:
        v = self.values
        lengths = tuple(v["model.lengths"])
        return ModelConfig(
            dimension=v["model.dimension"], lengths=lengths, T=v["model.T"],
            kappa1=v["model.kappa1"], kappa2=v["model.kappa2"], gamma=v["model.gamma"],
            mu=v["model.mu"], epsilon=v["model.epsilon"], noise_modes=v["noise.modes"],
            decay=v["noise.decay"], sigma=v["noise.sigma"],
            initial=InitialCondition(v["initial.kind"], v["initial.amplitude"], tuple(v["initial.value"]), lengths),
            stopping=v["stopping.mode"], R=v["stopping.R"], solver=v["solver.method"],
        )

    def plan(self) -> ExperimentPlan:
        v = self.values
        return ExperimentPlan(
            dimension=v["model.dimension"], levels=v["experiment.levels"], n_paths=v["experiment.paths"],
            base_seed=v["noise.seed"], gamma=v["experiment.gamma"], q=v["stopping.q"],
            beta=v["stopping.beta"], alpha=v["stopping.alpha"], c_star=v["stopping.c_star"],
            reference_level=v["experiment.reference"],
        )

    def run_parameters(self, h: float) -> SchemeParams:
        """Scheme parameters of the single-trajectory run at mesh size ``h``."""
        v = self.values
        N = v["discretisation.N"]
        dt = v["model.T"] / N
        eps = v["model.epsilon"]
        mode = v["stopping.mode"]
        R = math.inf
        args = (h, dt, v["stopping.q"], v["stopping.beta"], v["stopping.alpha"], v["stopping.c_star"])
        if mode == "fixed":
            R = v["stopping.R"]
        elif mode == "auto":
            try:
                if v["model.dimension"] == 1:
                    R = select_radius_1d(*args)
                else:
                    R, eps = select_parameters_2d(*args)
            except ValueError as exc:
                raise ConfigError("stopping.mode", f"auto selection failed: {exc}") from None
            if not eps < 1:
                raise ConfigError("stopping.mode", f"auto selection gives epsilon={eps:.6g}, outside (0, 1)")
        try:
            return SchemeParams(
                T=v["model.T"], N=N, kappa1=v["model.kappa1"], kappa2=v["model.kappa2"],
                gamma=v["model.gamma"], mu=v["model.mu"], epsilon=eps, R=R,
                alpha=v["stopping.alpha"], tol=v["solver.tol"], solver=v["solver.method"],
            )
        except ValueError as exc:
            raise ConfigError("discretisation", str(exc)) from None


def parse_text(text: str, source: str = "<config>") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        if key in raw:
            raise ConfigError(key, "given twice")
        raw[key] = value
    return raw


def _positive(v, key):
    if not v > 0:
        raise ConfigError(key, f"must be positive, got {v!r}")


def build_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Typed, validated configuration from raw strings plus typed overrides."""
    values = {}
    for key, (parser, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(key, f"cannot parse {raw[key]!r}: {exc}") from None
        else:
            values[key] = default
    for key, val in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        values[key] = val
    if values["model.lengths"] is None:
        values["model.lengths"] = (1.0,) * values["model.dimension"]
    _validate(values)
    return RunConfig(values)


def _validate(v: dict) -> None:
    d = v["model.dimension"]
    if d not in (1, 2):
        raise ConfigError("model.dimension", f"must be 1 or 2, got {d}")
    if len(v["model.lengths"]) != d:
        raise ConfigError("model.lengths", f"needs {d} entries for dimension {d}")
    for L in v["model.lengths"]:
        _positive(L, "model.lengths")
    for key in ("model.T", "model.kappa1", "model.kappa2", "model.gamma", "model.mu",
                "noise.sigma", "stopping.alpha", "stopping.c_star", "solver.tol", "experiment.gamma"):
        _positive(v[key], key)
    eps = v["model.epsilon"]
    if d == 1 and eps != 0:
        raise ConfigError("model.epsilon", "must be 0 in dimension 1 (the 1D scheme is unregularised)")
    if not 0 <= eps < 1:
        raise ConfigError("model.epsilon", f"must lie in [0, 1), got {eps!r}")
    if d == 2 and eps == 0 and v["stopping.mode"] != "auto":
        raise ConfigError("model.epsilon", "must be positive in dimension 2 unless stopping.mode = auto")
    if not 0 < v["stopping.alpha"] < 0.5:
        raise ConfigError("stopping.alpha", f"must lie in (0, 1/2), got {v['stopping.alpha']!r}")
    for key in ("stopping.q", "stopping.beta"):
        if not 0 < v[key] < 1:
            raise ConfigError(key, f"must lie in (0, 1), got {v[key]!r}")
    if v["stopping.mode"] not in ("none", "auto", "fixed"):
        raise ConfigError("stopping.mode", f"must be none, auto or fixed, got {v['stopping.mode']!r}")
    if v["stopping.mode"] == "fixed" and not v["stopping.R"] >= 0:
        raise ConfigError("stopping.R", "must be non-negative")
    if v["noise.modes"] < 0:
        raise ConfigError("noise.modes", "must be non-negative")
    if not v["noise.decay"] > 3.5:
        raise ConfigError("noise.decay", f"must exceed 7/2 for a summable noise covariance, got {v['noise.decay']!r}")
    for key in ("discretisation.n_cells", "discretisation.N", "experiment.paths",
                "epsilon_study.n_modes", "epsilon_study.N", "epsilon_study.paths",
                "epsilon_study.substeps", "output.field_every"):
        if v[key] < 1:
            raise ConfigError(key, f"must be at least 1, got {v[key]}")
    if v["initial.kind"] not in ("cosine", "constant", "zero"):
        raise ConfigError("initial.kind", f"must be cosine, constant or zero, got {v['initial.kind']!r}")
    if len(v["initial.value"]) != 3:
        raise ConfigError("initial.value", "needs 3 components")
    if v["solver.method"] not in ("auto", "dense", "direct", "gmres"):
        raise ConfigError("solver.method", f"unknown method {v['solver.method']!r}")
    levels = v["experiment.levels"]
    if not levels:
        raise ConfigError("experiment.levels", "needs at least one n_cells:N pair")
    try:
        ExperimentPlan(dimension=d, levels=levels, n_paths=v["experiment.paths"], gamma=v["experiment.gamma"],
                       q=v["stopping.q"], beta=v["stopping.beta"], alpha=v["stopping.alpha"],
                       c_star=v["stopping.c_star"], reference_level=v["experiment.reference"])
    except (ValueError, IndexError) as exc:
        raise ConfigError("experiment.levels", str(exc)) from None
    eps_list = v["epsilon_study.eps"]
    if any(b > a for a, b in zip(eps_list, eps_list[1:])) or any(not 0 <= e < 1 for e in eps_list):
        raise ConfigError("epsilon_study.eps", "must be decreasing values in [0, 1)")


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(str(p), f"cannot read: {exc.strerror}") from None
        raw = parse_text(text, str(p))
    return build_config(raw, overrides)
