"""Flat ``key=value`` run configuration shared by the CLI and the scripts."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .backbone import VARIANTS
from .consensus import INIT_MODES, ConsensusConfig
from .errors import ConfigError
from .evaluation import DEFAULT_THRESHOLDS
from .matcher import DEFAULT_CHUNK, DEFAULT_KEEP_FRACTION
from .synth import DEFAULT_ANNOTATIONS, WARP_KINDS
from .training import DEFAULT_LAMBDA, DEFAULT_LR, DEFAULT_SIGMA, TrainConfig

BACKBONES = ("patch", "toy")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class PipelineConfig:
    """Every knob a CLI run can turn.

    Optional numeric fields accept ``none`` in files and on the command line.
    """

    seed: int = 0
    # synthetic scene
    size: int = 128
    warp: str = "translation"
    tx: float | None = 5.0
    ty: float | None = 0.0
    n_annotations: int = DEFAULT_ANNOTATIONS
    # features
    backbone: str = "patch"
    patch: int = 5
    variant: str = "a"
    width: int = 16
    # consensus
    nc_layers: str = "5:1:1"
    nc_init: str = "consensus"
    # matching and evaluation
    keep_fraction: float = DEFAULT_KEEP_FRACTION
    top_k: int = 500
    thresholds: str = ",".join(f"{t:g}" for t in DEFAULT_THRESHOLDS)
    chunk: int = DEFAULT_CHUNK
    workers: int = 1
    # training
    train_size: int = 32
    train_annotations: int = 16
    steps: int = 200
    lr: float = DEFAULT_LR
    optimizer: str = "adam"
    halve_every: int | None = None
    sigma: float = DEFAULT_SIGMA
    lam: float = DEFAULT_LAMBDA
    # bench / grad-check
    bench_sizes: str = "4,6,8"
    grad_size: int = 16
    grad_width: int = 4
    grad_nc_layers: str = "3:1:2,3:2:1"
    grad_annotations: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.warp not in WARP_KINDS:
            raise ConfigError(f"warp must be one of {WARP_KINDS}, got {self.warp!r}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.nc_init not in INIT_MODES:
            raise ConfigError(f"nc_init must be one of {INIT_MODES}, got {self.nc_init!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0 < self.keep_fraction <= 1:
            raise ConfigError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        for name in ("size", "n_annotations", "patch", "width", "top_k", "chunk", "workers",
                     "train_size", "train_annotations", "grad_size", "grad_width",
                     "grad_annotations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        self.consensus()
        ConsensusConfig.parse(self.grad_nc_layers)
        self.threshold_list()
        self.bench_list()

    def consensus(self) -> ConsensusConfig:
        return ConsensusConfig.parse(self.nc_layers)

    def threshold_list(self) -> list[float]:
        try:
            return [float(t) for t in self.thresholds.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad thresholds {self.thresholds!r}") from exc

    def bench_list(self) -> list[int]:
        try:
            sizes = [int(s) for s in self.bench_sizes.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad bench_sizes {self.bench_sizes!r}") from exc
        if any(s < 1 for s in sizes):
            raise ConfigError("bench sizes must be positive")
        return sizes

    def translation(self) -> tuple[float, float] | None:
        if self.warp != "translation" or self.tx is None or self.ty is None:
            return None
        return (self.tx, self.ty)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, halve_every=self.halve_every,
                           optimizer=self.optimizer, sigma=self.sigma, lam=self.lam,
                           variant=self.variant, consensus=self.consensus())

    # -- serialisation ----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: dict[str, str]) -> "PipelineConfig":
        values = dataclasses.asdict(self)
        values.update(_coerce_all(overrides))
        return PipelineConfig(**values)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls().with_overrides(parse_text(Path(path).read_text(encoding="utf-8"), str(path)))


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    f = _FIELDS[key]
    optional = "None" in str(f.type)
    raw = raw.strip()
    if optional and raw.lower() == "none":
        return None
    kind = str(f.type).split("|")[0].strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc
    return raw


def _coerce_all(pairs: dict[str, str]) -> dict:
    return {k: _coerce(k, v) for k, v in pairs.items()}


def parse_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        if key not in _FIELDS:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def resolve(path=None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``overrides``."""
    cfg = PipelineConfig.load(path) if path else PipelineConfig()
    return cfg.with_overrides(overrides or {})
