"""Experiment configuration: TOML sections mapped onto dataclasses.

Selection probability is written as a string "m/n" so it stays exact.

    seed = 7
    protocol = "secure"          # secure | baseline | none

    [selection]
    n = 100
    c = "1/10"
    rounds = 10
    beta = 0.2
    g = 16
    grind_objective = "honest_ratio"

    [server]
    drop_fraction = 0.5

    [attack]
    name = "colluding"
    trials = 10

    [fl]
    n_clients = 10
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Optional

import tomli

from .fedavg import TaskConfig
from .protocol import ServerBehavior
from .simulation import OBJECTIVES, SimulationConfig
from .vrf import as_fraction

__all__ = ["ConfigError", "SelectionSection", "ServerSection", "AttackSection", "CheckSection",
           "CostsSection", "ExperimentConfig", "load_config", "parse_config", "ATTACKS", "PROTOCOLS"]

ATTACKS = ("colluding", "noncolluding", "grind-baseline", "grind-secure", "omission")
PROTOCOLS = ("secure", "baseline", "none")


class ConfigError(ValueError):
    pass


def parse_fraction(value) -> Fraction:
    if isinstance(value, float):
        raise ConfigError("write c as an exact fraction string such as \"1/100\"")
    try:
        c = as_fraction(value)
    except (ValueError, ZeroDivisionError, TypeError) as e:
        raise ConfigError(f"bad fraction {value!r}: {e}") from None
    if not 0 < c <= 1:
        raise ConfigError("c must satisfy 0 < c <= 1")
    return c


@dataclass(frozen=True)
class SelectionSection:
    n: int = 100
    c: Fraction = Fraction(1, 10)
    kappa: Optional[int] = None
    tau: Optional[int] = None
    beta: float = 0.0
    g: int = 1
    miner_fraction: float = 0.0
    grind_objective: Optional[str] = None
    rounds: int = 10
    n_observers: int = 2
    victim: Optional[int] = None
    rsa_bits: int = 2048


@dataclass(frozen=True)
class ServerSection:
    drop_fraction: float = 0.0
    withhold_only: bool = False
    omit_disputer_in_final: bool = False
    equivocate: bool = False


@dataclass(frozen=True)
class AttackSection:
    name: Optional[str] = None
    trials: int = 10
    victim: int = 0
    colluders: int = 5
    cohort: int = 5
    key_budget: int = 256
    objective: Optional[str] = None
    reuse_global: bool = True
    warmup_rounds: int = 0


@dataclass(frozen=True)
class CheckSection:
    eps: float = 0.2
    floor: float = 0.99
    alpha_level: float = 1e-3


@dataclass(frozen=True)
class CostsSection:
    ns: tuple = (1000, 10000)
    rounds: int = 10
    protocols: tuple = ("secure", "baseline")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    protocol: str = "secure"
    out: Optional[str] = None
    strict: bool = False
    selection: SelectionSection = field(default_factory=SelectionSection)
    server: ServerSection = field(default_factory=ServerSection)
    attack: AttackSection = field(default_factory=AttackSection)
    fl: TaskConfig = field(default_factory=TaskConfig)
    check: CheckSection = field(default_factory=CheckSection)
    costs: CostsSection = field(default_factory=CostsSection)

    def __post_init__(self):
        s = self.selection
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}")
        if s.n < 1 or s.rounds < 1:
            raise ConfigError("n and rounds must be >= 1")
        if not 0 <= s.beta < 1:
            raise ConfigError("beta must lie in [0, 1)")
        if s.tau is not None and s.tau < 1:
            raise ConfigError("tau must be >= 1")
        if s.g < 0 or s.g > self.kappa:
            raise ConfigError(f"g must lie in [0, kappa={self.kappa}]")
        if s.grind_objective is not None and s.grind_objective not in OBJECTIVES:
            raise ConfigError(f"grind_objective must be one of {OBJECTIVES}")
        if self.attack.name is not None and self.attack.name not in ATTACKS:
            raise ConfigError(f"attack must be one of {ATTACKS}")
        if self.attack.trials < 1:
            raise ConfigError("attack trials must be >= 1")

    @property
    def kappa(self) -> int:
        if self.selection.kappa is not None:
            return self.selection.kappa
        return 128 if self.strict else 64

    @property
    def alpha(self) -> float:
        return 1.0 - self.selection.beta

    def simulation(self) -> SimulationConfig:
        s, b = self.selection, self.server
        try:
            return SimulationConfig(
                n=s.n, c=s.c, kappa=self.kappa, strict=self.strict, rsa_bits=s.rsa_bits, tau=s.tau,
                rounds=s.rounds, seed=self.seed, beta=s.beta, grind_budget=s.g,
                miner_fraction=s.miner_fraction, grind_objective=s.grind_objective,
                behavior=ServerBehavior(drop_fraction=b.drop_fraction, withhold_only=b.withhold_only,
                                        omit_disputer_in_final=b.omit_disputer_in_final,
                                        equivocate=b.equivocate),
                n_observers=s.n_observers, victim=s.victim)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       strict: Optional[bool] = None) -> "ExperimentConfig":
        kw = {}
        if seed is not None:
            kw["seed"] = seed
        if out is not None:
            kw["out"] = out
        if strict:
            kw["strict"] = True
        return replace(self, **kw) if kw else self


def _section(cls, data: dict, name: str, convert=None):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    data = dict(data)
    if convert:
        data = convert(data)
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}]: {e}") from None


def _selection(d: dict) -> dict:
    if "c" in d:
        d["c"] = parse_fraction(d["c"])
    return d


def _costs(d: dict) -> dict:
    for k in ("ns", "protocols"):
        if k in d:
            d[k] = tuple(d[k])
    return d


def parse_config(data: dict) -> ExperimentConfig:
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {k: data[k] for k in ("seed", "protocol", "out", "strict") if k in data}
    kw["selection"] = _section(SelectionSection, data.get("selection", {}), "selection", _selection)
    kw["server"] = _section(ServerSection, data.get("server", {}), "server")
    kw["attack"] = _section(AttackSection, data.get("attack", {}), "attack")
    kw["fl"] = _section(TaskConfig, data.get("fl", {}), "fl")
    kw["check"] = _section(CheckSection, data.get("check", {}), "check")
    kw["costs"] = _section(CostsSection, data.get("costs", {}), "costs", _costs)
    return ExperimentConfig(**kw)


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from None
    return parse_config(data)
