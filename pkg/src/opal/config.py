"""Experiment configuration: dataclasses, profiles and INI round-tripping."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from .env_tasks import FAMILIES
from .meta_train import ConfigError, TrainConfig

MODES = ("train", "evaluate", "compare", "ablate", "graph_dump", "inspect_program")
ALGORITHMS = ("opal", "de", "pso")
EVAL_FUNCTIONS = FAMILIES[:6]


@dataclass
class EvalConfig:
    functions: Tuple[str, ...] = EVAL_FUNCTIONS
    dims: Tuple[int, ...] = (30, 50, 100)
    runs: int = 20
    budget_multiplier: int = 10_000
    rho: float = 0.2
    algorithms: Tuple[str, ...] = ALGORITHMS
    workers: int = 0
    seed: int = 0

    def budget(self, dim: int) -> int:
        return self.budget_multiplier * dim

    def validate(self) -> "EvalConfig":
        for fn in self.functions:
            if fn not in FAMILIES:
                raise ConfigError("eval.functions", f"unknown function {fn!r}")
        if not self.functions:
            raise ConfigError("eval.functions", "must not be empty")
        if not self.dims or min(self.dims) < 2:
            raise ConfigError("eval.dims", "need at least one dimension >= 2")
        if self.runs < 1:
            raise ConfigError("eval.runs", "must be >= 1")
        if self.budget_multiplier < 1:
            raise ConfigError("eval.budget_multiplier", "must be >= 1")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError("eval.rho", f"must lie in (0, 1), got {self.rho}")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                raise ConfigError("eval.algorithms", f"unknown algorithm {a!r}")
        if self.workers < 0:
            raise ConfigError("eval.workers", "must be >= 0 (0 = all cores)")
        return self


@dataclass
class Paths:
    out_dir: str = "runs"
    checkpoint_in: Optional[str] = None
    checkpoint_out: Optional[str] = None
    log_out: Optional[str] = None
    records_in: Optional[str] = None
    records_out: Optional[str] = None
    report_out: Optional[str] = None

    def resolve(self, name: str, default: str) -> Path:
        value = getattr(self, name)
        return Path(value) if value else Path(self.out_dir) / default


@dataclass
class ExperimentConfig:
    mode: str = "train"
    profile: str = "standard"
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: Paths = field(default_factory=Paths)
    function: str = "sphere"
    dim: int = 10
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}")
        if self.profile not in PROFILES:
            raise ConfigError("profile", f"must be one of {sorted(PROFILES)}")
        if self.function not in FAMILIES:
            raise ConfigError("function", f"unknown function {self.function!r}")
        self.train.validate()
        self.eval.validate()
        return self

    # -- serialisation --

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["experiment"] = {k: _fmt(getattr(self, k))
                            for k in ("mode", "profile", "function", "dim", "seed")}
        for section in ("train", "eval", "paths"):
            obj = getattr(self, section)
            cp[section] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        buf = []

        class _W:
            def write(self, s):
                buf.append(s)

        cp.write(_W())
        return "".join(buf)

    @classmethod
    def from_ini(cls, text: str, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string(text)
        cfg = base if base is not None else cls()
        if cp.has_section("experiment"):
            prof = cp["experiment"].get("profile")
            if prof and base is None:
                cfg = profile(prof)
            for key, raw in cp["experiment"].items():
                _assign(cfg, key, raw, "experiment")
        for section in ("train", "eval", "paths"):
            if cp.has_section(section):
                obj = getattr(cfg, section)
                for key, raw in cp[section].items():
                    _assign(obj, key, raw, section)
        return cfg


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_kind(obj, name):
    for f in dataclasses.fields(obj):
        if f.name == name:
            return f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    return None


def _assign(obj, key, raw, section):
    kind = _field_kind(obj, key)
    if kind is None:
        raise ConfigError(f"{section}.{key}", "unknown option")
    try:
        setattr(obj, key, parse_value(kind, raw))
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}", str(exc)) from None


def parse_value(kind: str, raw: str):
    raw = raw.strip()
    optional = "Optional" in kind
    if optional and raw == "":
        return None
    if "Tuple" in kind:
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(int(s) for s in items) if "int" in kind else tuple(items)
    if "bool" in kind:
        return raw.lower() in ("1", "true", "yes", "on")
    if "int" in kind:
        return int(raw)
    if "float" in kind:
        return float(raw)
    return raw


def _desk() -> ExperimentConfig:
    cfg = ExperimentConfig(profile="desk")
    cfg.train.episodes = 500
    cfg.train.dims = (10,)
    cfg.eval.dims = (10,)
    cfg.eval.runs = 10
    cfg.eval.budget_multiplier = 1000
    return cfg


PROFILES = {"standard": lambda: ExperimentConfig(profile="standard"), "desk": _desk}


def profile(name: str) -> ExperimentConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError("profile", f"must be one of {sorted(PROFILES)}") from None


def load_config(path, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    return ExperimentConfig.from_ini(Path(path).read_text(), base)
