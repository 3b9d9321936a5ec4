"""Benchmark configuration: flat `key = value` files, validation, and the
two built-in presets."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

PROTOCOLS = ("chord", "pastry", "kademlia")
REGIMES = ("immediate", "warmed", "warmup_only")

NUM_SKILLS = 50


class ConfigError(Exception):
    pass


@dataclass
class BenchmarkConfig:
    protocol: tuple = PROTOCOLS          # one or more of chord/pastry/kademlia
    nodes: int = 4096
    reps: int = 10
    seed: int = 42
    regime: tuple = ("immediate", "warmed")
    horizon: float = 40.0
    query_rate: float = 0.125
    target_skill: str = "skill_05"
    top_k: int = 1
    churn_enabled: bool = False
    session_mean: float = 100.0
    downtime_mean: float = 30.0
    publish_spread: float = 0.0
    replication: int = 3
    ttl: float = 60.0
    republish_period: float = 20.0
    latency: float = 1.0
    loss: float = 0.0
    underlay_avg_degree: float = 6.0
    id_bits: int = 64
    pastry_b: int = 4
    pastry_leafset: int = 16
    kad_k: int = 20
    kad_alpha: int = 3
    stabilize_period: float = 2.0
    successor_list: int = 8

    def validate(self) -> None:
        if not self.protocol:
            raise ConfigError("at least one protocol is required")
        for p in self.protocol:
            if p not in PROTOCOLS:
                raise ConfigError(f"unknown protocol {p!r}; expected one of {', '.join(PROTOCOLS)}")
        if not self.regime:
            raise ConfigError("at least one regime is required")
        for r in self.regime:
            if r not in REGIMES:
                raise ConfigError(f"unknown regime {r!r}; expected one of {', '.join(REGIMES)}")
        if self.nodes < 1:
            raise ConfigError("nodes must be >= 1")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if self.query_rate <= 0:
            raise ConfigError("query_rate must be positive")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.latency <= 0:
            raise ConfigError("latency must be positive")
        if not 0.0 <= self.loss <= 1.0:
            raise ConfigError("loss must be in [0, 1]")
        if self.churn_enabled and (self.session_mean <= 0 or self.downtime_mean <= 0):
            raise ConfigError("session_mean and downtime_mean must be positive")
        if self.publish_spread < 0:
            raise ConfigError("publish_spread must be >= 0")
        if self.replication < 1:
            raise ConfigError("replication must be >= 1")
        if self.ttl <= 0 or self.republish_period <= 0:
            raise ConfigError("ttl and republish_period must be positive")
        if not 1 <= self.id_bits <= 64:
            raise ConfigError("id_bits must be in [1, 64]")
        if self.pastry_b < 1 or self.id_bits % self.pastry_b != 0:
            raise ConfigError("pastry_b must be >= 1 and divide id_bits")
        if self.pastry_leafset < 2 or self.pastry_leafset % 2 != 0:
            raise ConfigError("pastry_leafset must be an even number >= 2")
        if self.kad_k < 1 or self.kad_alpha < 1:
            raise ConfigError("kad_k and kad_alpha must be >= 1")
        if self.stabilize_period <= 0:
            raise ConfigError("stabilize_period must be positive")
        if self.successor_list < 1:
            raise ConfigError("successor_list must be >= 1")
        if self.underlay_avg_degree < 0:
            raise ConfigError("underlay_avg_degree must be >= 0")
        idx = skill_index(self.target_skill)
        if idx is None:
            raise ConfigError(f"target_skill must be skill_00..skill_{NUM_SKILLS - 1}, got {self.target_skill!r}")
        if idx >= self.nodes:
            raise ConfigError(f"{self.target_skill} has no providers with nodes={self.nodes}")

    @property
    def warmup(self) -> float:
        return math.log2(self.nodes) if self.nodes > 1 else 0.0


def skill_index(label: str):
    if not label.startswith("skill_"):
        return None
    try:
        idx = int(label[6:])
    except ValueError:
        return None
    return idx if 0 <= idx < NUM_SKILLS else None


_TUPLE_KEYS = {"protocol", "regime"}
_BOOL_KEYS = {"churn_enabled"}
_INT_KEYS = {"nodes", "reps", "seed", "top_k", "replication", "id_bits",
             "pastry_b", "pastry_leafset", "kad_k", "kad_alpha", "successor_list"}
_FLOAT_KEYS = {"horizon", "query_rate", "session_mean", "downtime_mean",
               "publish_spread", "ttl", "republish_period", "latency", "loss",
               "underlay_avg_degree", "stabilize_period"}
_STR_KEYS = {"target_skill"}
ALL_KEYS = _TUPLE_KEYS | _BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _STR_KEYS


def parse_config(text: str) -> BenchmarkConfig:
    """Parse flat `key = value` lines; `#` starts a comment."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key in _TUPLE_KEYS:
                values[key] = tuple(v.strip() for v in val.split(",") if v.strip())
            elif key in _BOOL_KEYS:
                if val.lower() not in ("true", "false"):
                    raise ValueError(val)
                values[key] = val.lower() == "true"
            elif key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {val!r} for key {key!r}")
    cfg = BenchmarkConfig(**values)
    cfg.validate()
    return cfg


def load_config(path: str) -> BenchmarkConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def format_config(cfg: BenchmarkConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _TUPLE_KEYS:
            v = ",".join(v)
        elif f.name in _BOOL_KEYS:
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def preset(name: str) -> BenchmarkConfig:
    if name == "stationary":
        return BenchmarkConfig()
    if name == "churn":
        return BenchmarkConfig(
            reps=1,
            seed=45,
            regime=("warmup_only",),
            horizon=60.0,
            query_rate=0.1,
            churn_enabled=True,
            publish_spread=20.0,
        )
    raise ConfigError(f"unknown preset {name!r}; expected stationary or churn")
