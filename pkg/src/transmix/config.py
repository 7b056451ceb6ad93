"""Run configuration: JSON in, validated dataclass out, and back again losslessly."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

COMMANDS = ("spectrum", "heat", "transport-mc", "heat-mc", "euler", "poincare", "orbits", "report")
FAMILIES = ("unit_shell", "shells", "powerlaw", "explicit")


class ConfigError(ValueError):
    """Raised with every violated precondition listed in ``errors``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class RunConfig:
    command: str
    d: int = 2
    N: int = 24
    theta: dict = field(default_factory=lambda: {"family": "unit_shell"})
    kappa: float | str = 1.0
    lam: float = 0.0
    nu: float = 0.0
    alpha: float = 0.5
    p_list: list = field(default_factory=lambda: [1.5, 2.0, 3.0])
    beta_list: list = field(default_factory=lambda: [-1.0, 1.0])
    epsilon: float | None = None
    dt: float | None = None
    safety: float = 0.5
    sample_stride: int = 10
    T: float = 0.03
    paths: int = 256
    base_seed: int = 0
    workers: int = 1
    truncation: str = "conservative"
    margin: int = 2
    gate: float = 1e-3
    init_r2: int = 2
    tau: float | None = None
    lambda_target: float | None = None
    grid: int = 64
    M: float = 10.0
    R: float | None = None
    refine_paths: int = 8
    l: list | None = None
    l2: list | None = None
    cover_margin: int = 3
    sequences: int = 1000
    max_support: int = 64
    inputs: list = field(default_factory=list)
    output: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def hash_key(self) -> str:
        d = asdict(self)
        d.pop("output")
        d.pop("workers")
        return json.dumps(d, sort_keys=True)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_INT = {"d", "N", "sample_stride", "paths", "base_seed", "workers", "margin", "init_r2", "grid",
        "refine_paths", "cover_margin", "sequences", "max_support"}
_FLOAT = {"lam", "nu", "alpha", "safety", "T", "gate", "M"}
_OPT_FLOAT = {"epsilon", "dt", "tau", "lambda_target", "R"}
_LISTS = {"p_list", "beta_list", "inputs"}


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def parse_config(text: str | dict, strict: bool = True) -> RunConfig:
    """Parse and validate; raises ConfigError naming every problem found."""
    if isinstance(text, str):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError([f"not valid JSON: {e}"]) from None
    else:
        raw = dict(text)
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be an object"])
    errors = []
    if "lambda" in raw and "lam" not in raw:
        raw["lam"] = raw.pop("lambda")
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        if strict:
            errors.append(f"unknown keys: {', '.join(unknown)}")
        for k in unknown:
            raw.pop(k)
    if "command" not in raw:
        errors.append("missing key: command")
    vals = {}
    for k, v in raw.items():
        if k in _INT:
            if isinstance(v, bool) or not isinstance(v, int):
                errors.append(f"{k}: expected an integer, got {v!r}")
                continue
        elif k in _FLOAT:
            if not _is_num(v):
                errors.append(f"{k}: expected a finite number, got {v!r}")
                continue
            v = float(v)
        elif k in _OPT_FLOAT:
            if v is not None and not _is_num(v):
                errors.append(f"{k}: expected a number or null, got {v!r}")
                continue
            v = None if v is None else float(v)
        elif k in _LISTS:
            if not isinstance(v, list):
                errors.append(f"{k}: expected a list")
                continue
            if k != "inputs":
                if not all(_is_num(x) for x in v):
                    errors.append(f"{k}: entries must be numbers")
                    continue
                v = [float(x) for x in v]
        vals[k] = v
    if errors:
        raise ConfigError(errors)
    cfg = RunConfig(**vals)
    errors = validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def validate(cfg: RunConfig) -> list:
    e = []
    if cfg.command not in COMMANDS:
        e.append(f"command: must be one of {', '.join(COMMANDS)}")
        return e
    if cfg.d < 2:
        e.append("d: dimension must be at least 2")
    if cfg.N < 1:
        e.append("N: box radius must be positive")
    if not isinstance(cfg.theta, dict) or cfg.theta.get("family") not in FAMILIES:
        e.append(f"theta.family: must be one of {', '.join(FAMILIES)}")
    if cfg.kappa == "auto":
        if cfg.command != "euler":
            e.append("kappa: 'auto' is only meaningful for euler runs")
    elif not _is_num(cfg.kappa) or cfg.kappa <= 0:
        if cfg.command not in ("poincare", "orbits", "report"):
            e.append("kappa: must be positive")
    if cfg.lam < 0:
        e.append("lam: must be nonnegative")
    if cfg.nu < 0:
        e.append("nu: must be nonnegative")
    if cfg.command in ("heat", "heat-mc") and not cfg.nu > 0:
        e.append("nu: the stochastic heat equation needs nu > 0")
    if cfg.command in ("spectrum", "transport-mc") and (cfg.lam != 0 or cfg.nu != 0):
        e.append("lam/nu: transport runs take lam = nu = 0; use heat or heat-mc")
    if any(p <= 1 for p in cfg.p_list):
        e.append("p_list: every p must exceed 1")
    if cfg.epsilon is not None:
        if not any(0 < -b <= cfg.d / 4 for b in cfg.beta_list):
            e.append("epsilon: only used for H^-beta decay with 0 < beta <= d/4; "
                     "add such a beta (as -beta) to beta_list")
        for b in cfg.beta_list:
            if 0 < -b <= cfg.d / 4:
                top = -b * (cfg.d + 2 * b) / cfg.d**2
                if not 0 < cfg.epsilon < top:
                    e.append(f"epsilon: must lie in (0, beta(d-2beta)/d^2) = (0, {top!r}) "
                             f"for beta={-b:g}")
    if cfg.dt is not None and not cfg.dt > 0:
        e.append("dt: must be positive")
    if not 0 < cfg.safety <= 1:
        e.append("safety: must lie in (0, 1]")
    if cfg.sample_stride < 1:
        e.append("sample_stride: must be at least 1")
    if not cfg.T > 0 and cfg.command not in ("poincare", "orbits", "report"):
        e.append("T: must be positive")
    if cfg.command in ("transport-mc", "heat-mc") and cfg.paths < 2:
        e.append("paths: need at least 2")
    if cfg.command == "euler":
        if cfg.d != 2:
            e.append("d: euler runs are two-dimensional")
        if cfg.grid < 12 or cfg.grid % 2:
            e.append("grid: must be even and at least 12")
        if not cfg.alpha > 0:
            e.append("alpha: must be positive")
        if not cfg.lam > 0:
            e.append("lam: the target rate must be positive")
        if cfg.R is not None and not cfg.R > 0:
            e.append("R: must be positive")
    if cfg.workers < 1:
        e.append("workers: must be at least 1")
    if cfg.truncation not in ("conservative", "absorbing"):
        e.append("truncation: must be conservative or absorbing")
    if cfg.margin < 0:
        e.append("margin: must be nonnegative")
    if not 0 < cfg.gate < 1:
        e.append("gate: must lie in (0, 1)")
    if cfg.command == "orbits":
        if not cfg.l or not any(cfg.l):
            e.append("l: a nonzero step vector is required")
        elif cfg.l2 is not None and len(cfg.l2) != len(cfg.l):
            e.append("l2: must have the same length as l")
    if cfg.command == "report" and not cfg.inputs:
        e.append("inputs: report needs at least one run directory")
    if cfg.lambda_target is not None and cfg.lambda_target <= 0:
        e.append("lambda_target: must be positive")
    return e


def envelope_warning(cfg: RunConfig, d_theta: float) -> str | None:
    """Warn when the requested almost-sure rate is outside the proven range."""
    if cfg.lambda_target is None or not _is_num(cfg.kappa):
        return None
    if cfg.lambda_target >= d_theta * cfg.kappa:
        msg = (f"lambda_target/kappa = {cfg.lambda_target / cfg.kappa!r} is not below "
               f"D(theta,d) = {d_theta!r}; the envelope is reported without a proven guarantee")
        warnings.warn(msg)
        return msg
    return None
