"""Experiment configuration: defaults, flat TOML files, command-line overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import ConfigError

METHODS = ("gpfl", "fedavg", "fedprox", "fedper", "ditto",
           "gpfl_wo_pci", "gpfl_wo_cov", "gpfl_wo_mlg", "gpfl_wo_gce")
PARTITIONS = ("pathological", "dirichlet", "iid")


@dataclass
class ExperimentConfig:
    # method
    method: str = "gpfl"
    lam: float = 1.0
    mu: float = 0.0
    squared_reg: bool = False
    prox_mu: float = 0.01
    ditto_lam: float = 0.1
    # model
    D: int = 32
    K: int = 16
    U: int = 8
    hidden: int = 64
    # optimisation / protocol
    eta: float = 0.005
    rounds: int = 300
    clients: int = 20
    batch_size: int = 10
    epochs: int = 1
    rho: float = 1.0
    rho_lo: float | None = None
    rho_hi: float | None = None
    parallel: bool = False
    weighted_mean: bool = False
    # data
    partition: str = "dirichlet"
    beta: float = 0.1
    classes_per_client: int = 2
    min_samples: int = 4
    n_samples: int = 2000
    spread: float = 0.5
    separation: float = 3.0
    unit_range: bool = True
    csv_path: str = ""
    train_fraction: float = 0.75
    # seeds
    seed_data: int = 0
    seed_init: int = 0
    seed_sample: int = 0
    seed_attack: int = 0
    # privacy probe
    capture_updates: bool = False
    capture_count: int = 10
    attack_steps: int = 300
    attack_lr: float = 0.1
    attack_restarts: int = 3
    # outputs
    out: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method: unknown method {self.method!r} (choose from {', '.join(METHODS)})")
        if self.partition not in PARTITIONS:
            raise ConfigError(f"partition: unknown partition {self.partition!r}")
        if not self.eta > 0:
            raise ConfigError("eta: must be > 0")
        if self.rounds < 0:
            raise ConfigError("rounds: must be >= 0")
        if self.K < 1 or self.D < 1 or self.hidden < 1:
            raise ConfigError("K/D/hidden: must be >= 1")
        if self.U < 2:
            raise ConfigError("U: must be >= 2")
        if self.clients < 1:
            raise ConfigError("clients: must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size/epochs: batch_size >= 1 and epochs >= 0")
        if (self.rho_lo is None) != (self.rho_hi is None):
            raise ConfigError("rho_lo/rho_hi: give both ends of the range")
        lo, hi = self.rho_spec if isinstance(self.rho_spec, tuple) else (self.rho_spec, self.rho_spec)
        if not 0 < lo <= hi <= 1:
            raise ConfigError("rho: need 0 < lo <= hi <= 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction: must lie in (0, 1)")
        if self.beta <= 0:
            raise ConfigError("beta: must be > 0")
        return self

    @property
    def rho_spec(self):
        if self.rho_lo is not None:
            return (float(self.rho_lo), float(self.rho_hi))
        return float(self.rho)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw).validate()


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_ALIASES = {"lambda": "lam", "T": "rounds", "N": "clients", "batch": "batch_size", "S": "classes_per_client"}


def _coerce(key: str, value):
    f = _FIELDS[key]
    default = f.default
    kind = type(default)
    if value is None:
        return None
    if key in ("rho_lo", "rho_hi"):
        kind = float
    try:
        if kind is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None


def normalise_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    key = _ALIASES.get(key, key)
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file's values, then ``overrides`` (flags).  Unknown keys are rejected."""
    values: dict = {}
    if path:
        p = Path(path)
        try:
            doc = tomllib.loads(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        for k, v in doc.items():
            if isinstance(v, dict):
                raise ConfigError(f"{k}: nested tables are not supported (flat key = value only)")
            nk = normalise_key(k)
            values[nk] = _coerce(nk, v)
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        nk = normalise_key(k)
        values[nk] = _coerce(nk, v)
    if "out" not in (overrides or {}) or (overrides or {}).get("out") is None:
        env_out = os.environ.get("GPFL_OUT")
        if env_out:
            values["out"] = env_out
    return ExperimentConfig(**values).validate()
