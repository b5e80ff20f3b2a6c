"""Training configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, fields

from wgpnn.errors import ConfigError


@dataclass(frozen=True)
class TrainConfig:
    window: int = 4  # M, past active slices per query
    num_points: int = 2  # N, pseudo-points per candidate
    dim: int = 32  # embedding and hidden size
    batch_size: int = 128
    lr: float = 1e-3
    alpha: float = 1e-3
    beta: float = 1e-3
    nu: float = 1.0
    epochs: int = 200
    seed: int = 0
    patience: int = 3
    quad_points: int = 16
    query_weight: float = 1.0
    jitter: float = 1e-8
    worst_case_ties: bool = False

    def __post_init__(self):
        for name in ("window", "num_points", "dim", "batch_size", "patience", "quad_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if min(self.alpha, self.beta, self.nu) < 0:
            raise ConfigError("alpha, beta and nu must be non-negative")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: dict, base: "TrainConfig | None" = None):
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        changes = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, raw, types[key])
        return base.replace(**changes)


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    try:
        if typ == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {typ})") from None
    return raw


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def write_config_file(path, config: TrainConfig):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in config.to_dict().items():
            fh.write(f"{key} = {value}\n")


FULL_SCALE_GRID = {
    "window": [4, 6, 8, 10],
    "num_points": [1, 2, 4, 6],
    "dim": [200, 300],
    "batch_size": [600, 800, 1000],
}


def expand_grid(grid: dict[str, list], base: TrainConfig | None = None) -> list[TrainConfig]:
    base = base or TrainConfig()
    keys = list(grid)
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        values = base.to_dict()
        values.update(zip(keys, combo))
        out.append(TrainConfig.from_mapping({k: str(v) for k, v in values.items()}))
    return out
