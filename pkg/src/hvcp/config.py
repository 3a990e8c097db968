"""Flat ``key=value`` configuration shared by training, completion and evaluation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    # model
    resolution: int = 32
    channels: int = 32
    rank: int = 8
    levels: int = 4
    d_z: int = 16
    global_dim: int = 128
    global_latent: int = 64
    encoder_hidden: int = 64
    global_hidden: int = 128
    stoch_hidden: tuple[int, ...] = (64, 64)
    head_hidden: int = 64
    decoder_hidden: int = 128
    variant: str = "hierarchical"
    share_axes: bool = False
    scatter: str = "max"
    # training
    batch_size: int = 4
    iterations: int = 50000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_max: float = 0.1
    warmup: int = 10000
    queries: int = 2048
    seed: int = 0
    checkpoint_every: int = 1000
    data: str = ""
    checkpoint: str = ""
    # extraction and evaluation
    iso: float = 0.5
    extract_side: int = 64
    samples: int = 10
    completion_points: int = 2048
    fscore_tau: float = 0.01
    uhd_mode: str = "max-min"
    tmd_mode: str = "pair-mean"
    iou_samples: int = 100000
    nc_samples: int = 10000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ["resolution", "channels", "rank", "levels", "d_z", "global_dim", "global_latent",
                    "encoder_hidden", "global_hidden", "head_hidden", "decoder_hidden", "batch_size",
                    "iterations", "queries", "checkpoint_every", "extract_side", "samples",
                    "completion_points", "iou_samples", "nc_samples"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0 or self.lambda_max < 0 or self.warmup < 1 or self.fscore_tau <= 0:
            raise ConfigError("lr and lambda_max must be >= 0, warmup >= 1 and fscore_tau > 0")
        if self.warmup > self.iterations:
            raise ConfigError(f"warmup ({self.warmup}) must not exceed iterations ({self.iterations})")
        if self.resolution % (2 ** (self.levels - 1)):
            raise ConfigError(f"resolution {self.resolution} must be divisible by 2^(levels-1)")
        if not 0.0 < self.iso < 1.0:
            raise ConfigError("iso must lie in (0, 1)")
        choices = {
            "variant": ("hierarchical", "local", "global-factors", "global"),
            "scatter": ("max", "mean"),
            "uhd_mode": ("max-min", "mean-min"),
            "tmd_mode": ("pair-mean", "sum"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, tuple):
                text = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "Config":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _convert(key, types[key], value)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.parse(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.serialize())


def _convert(key: str, typ: str, value: str):
    try:
        if typ == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ.startswith("tuple"):
            return tuple(int(v) for v in value.split(",") if v.strip())
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None
