"""Experiment configuration: a flat INI file with a few fixed sections.

Every key belongs to exactly one section (see ``SECTIONS``). Vector and
matrix values are written as JSON lists. ``save_config`` followed by
``load_config`` reproduces the configuration exactly.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

KINDS = ("fixed-horizon", "mpc", "riccati-check", "filter-check")
ALIASES = {"linear-filter-check": "filter-check"}
MODELS = ("pendulum", "linear")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str = "fixed-horizon"
    seed: int = 0
    out_dir: str = "out"
    repetitions: int = 1
    batch_size: int = 100

    model: str = "pendulum"
    gamma: float = 5.0
    A: list = field(default_factory=lambda: [[0.0, 1.0], [0.0, 0.0]])
    b: list = field(default_factory=lambda: [0.0, 0.0])
    G: list = field(default_factory=lambda: [[0.0], [1.0]])
    H: list = field(default_factory=lambda: [[1.0, 0.0]])
    obs_cov: float = 1.0
    twin_noise: float = 0.0
    init_mean: list = field(default_factory=lambda: [1.5707963267948966, 0.0])
    init_var: float = 0.1

    cost_weight: float = 50.0
    terminal_weight: float = 50.0
    target: list = field(default_factory=lambda: [0.0, 0.0])
    terminal_target: list = field(default_factory=lambda: [0.0, 0.0])

    M: int = 50
    K: int = 50
    n_iter: int = 3
    horizon: float = 2.0
    dt: float = 1e-3
    ridge_rel: float = 1e-8
    symmetrize: bool = False

    replan_interval: float = 0.05
    duration: float = 2.0
    warm_start: bool = True
    truth_init: str = "sample"

    gain_tol: float = 0.05
    offset_tol: float = 0.05
    convergence_tol: float = 0.05
    stabilization_frac: float = 0.2
    rate_band: float = 0.2

    def __post_init__(self):
        self.validate()

    def validate(self):
        self.kind = ALIASES.get(self.kind, self.kind)
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        for name in ("repetitions", "batch_size", "M", "K", "n_iter"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("dt", "horizon", "replan_interval", "duration", "obs_cov"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.twin_noise < 0 or self.init_var < 0 or self.ridge_rel < 0:
            raise ConfigError("twin_noise, init_var and ridge_rel must be non-negative")
        if not _divides(self.dt, self.horizon):
            raise ConfigError(f"dt={self.dt} does not divide horizon={self.horizon}")
        if self.kind == "mpc":
            if not _divides(self.dt, self.replan_interval):
                raise ConfigError(f"dt={self.dt} does not divide replan_interval={self.replan_interval}")
            if not _divides(self.replan_interval, self.duration):
                raise ConfigError("replan_interval does not divide duration")
            if self.replan_interval > self.horizon:
                raise ConfigError("replan_interval must not exceed the horizon")
        if self.truth_init not in ("mean", "sample"):
            raise ConfigError(f"truth_init must be 'mean' or 'sample', got {self.truth_init!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _divides(step, span):
    n = round(span / step)
    return n >= 1 and abs(n * step - span) <= 1e-9 * max(1.0, span)


SECTIONS = {
    "experiment": ("kind", "seed", "out_dir", "repetitions", "batch_size"),
    "model": ("model", "gamma", "A", "b", "G", "H", "obs_cov", "twin_noise", "init_mean", "init_var"),
    "cost": ("cost_weight", "terminal_weight", "target", "terminal_target"),
    "solver": ("M", "K", "n_iter", "horizon", "dt", "ridge_rel", "symmetrize"),
    "mpc": ("replan_interval", "duration", "warm_start", "truth_init"),
    "tolerances": ("gain_tol", "offset_tol", "convergence_tol", "stabilization_frac", "rate_band"),
}
_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_SECTION_OF = {key: sec for sec, keys in SECTIONS.items() for key in keys}
assert set(_SECTION_OF) == set(_FIELDS)


def _parse(key, text):
    kind = _FIELDS[key].type
    try:
        if kind == "bool":
            low = text.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "list":
            val = json.loads(text)
            if not isinstance(val, list):
                raise ValueError(text)
            return val
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {text!r} as {kind}") from exc


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return json.dumps(value)
    return str(value)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply ``key -> value`` pairs; string values are parsed like file entries."""
    changes = {}
    for key, val in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown configuration key {key!r}")
        changes[key] = _parse(key, val) if isinstance(val, str) else val
    return cfg.replace(**changes)


def config_from_string(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in _FIELDS or _SECTION_OF[key] != sec:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            values[key] = _parse(key, raw)
    if base is None:
        base = default_config(values.get("kind", "fixed-horizon"))
    return apply_overrides(base, values)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return config_from_string(text, base)


def config_to_string(cfg: ExperimentConfig) -> str:
    lines = []
    for sec, keys in SECTIONS.items():
        lines.append(f"[{sec}]")
        lines.extend(f"{key} = {_format(getattr(cfg, key))}" for key in keys)
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(config_to_string(cfg))


def default_config(kind: str) -> ExperimentConfig:
    """Desk-scale defaults for each experiment kind.

    The pendulum runs use the full-scale settings except for the number of
    receding-horizon repetitions (100 here, 5000 at full scale), two
    instead of three Picard sweeps per replan, and a 2.5 time-unit run.
    """
    kind = ALIASES.get(kind, kind)
    if kind == "fixed-horizon":
        return ExperimentConfig(kind=kind)
    if kind == "mpc":
        # two Picard sweeps per replan (warm-started) keep 100 repetitions within minutes
        return ExperimentConfig(kind=kind, horizon=0.5, duration=2.5, n_iter=2, repetitions=100)
    if kind in ("riccati-check", "filter-check"):
        lin = dict(model="linear", init_mean=[1.0, 0.0], init_var=1.0, cost_weight=1.0, terminal_weight=1.0,
                   horizon=1.0, obs_cov=1.0)
        if kind == "riccati-check":
            return ExperimentConfig(kind=kind, M=64, K=64, **lin)
        return ExperimentConfig(kind=kind, M=8, K=1, dt=1e-2, **lin)
    raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
