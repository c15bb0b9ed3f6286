"""Declarative run configuration (JSON or TOML) with a stable content hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import tomli

from .corpus import DEFAULT_RATIOS
from .imaging import DEFAULT_THRESHOLD, AugmentRanges
from .neural import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    corpus_root: str = ""
    work_dir: str = "work"


@dataclass
class SplitOptions:
    seed: int = 0
    ratios: tuple[float, float, float] = DEFAULT_RATIOS


@dataclass
class ImagingOptions:
    threshold: int = DEFAULT_THRESHOLD
    resize: str = "none"
    side: int = 128
    scale_mm_per_px: float = 1.0
    augment_copies: int = 0
    augment_seed: int = 0


@dataclass
class EnsembleOptions:
    method: str = "average"
    best_n: int | None = None
    stack_lambda: float = 1e-3
    stack_iterations: int = 2000


@dataclass
class MetricOptions:
    k_list: tuple[int, ...] = (1, 2, 3)
    exclude: tuple[str, ...] = ()


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    split: SplitOptions = field(default_factory=SplitOptions)
    imaging: ImagingOptions = field(default_factory=ImagingOptions)
    augmentation: AugmentRanges = field(default_factory=AugmentRanges)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seeds: tuple[int, ...] = (0,)
    ensemble: EnsembleOptions = field(default_factory=EnsembleOptions)
    metrics: MetricOptions = field(default_factory=MetricOptions)

    def validate(self) -> "RunConfig":
        r = self.split.ratios
        if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1) > 1e-9:
            raise ConfigError(f"split.ratios {r} must be three non-negative numbers summing to 1")
        if not 0 <= self.imaging.threshold <= 255:
            raise ConfigError("imaging.threshold must be in [0, 255]")
        if self.imaging.resize not in ("none", "squash", "pad"):
            raise ConfigError("imaging.resize must be none, squash or pad")
        if self.imaging.side < 1:
            raise ConfigError("imaging.side must be >= 1")
        if self.imaging.scale_mm_per_px <= 0:
            raise ConfigError("imaging.scale_mm_per_px must be positive")
        if self.imaging.augment_copies < 0:
            raise ConfigError("imaging.augment_copies must be >= 0")
        a = self.augmentation
        if not (0 <= a.max_rotation_deg <= 180 and 0 <= a.max_zoom_delta <= 0.2
                and 0 <= a.max_shear_deg <= 10 and 0 <= a.flip_probability <= 1):
            raise ConfigError("augmentation ranges exceed rotation 180, zoom 0.2, shear 10")
        if not self.seeds:
            raise ConfigError("at least one training seed is required")
        if self.ensemble.method not in ("average", "stack"):
            raise ConfigError("ensemble.method must be average or stack")
        if self.ensemble.best_n is not None and self.ensemble.best_n < 1:
            raise ConfigError("ensemble.best_n must be >= 1")
        if any(k < 1 for k in self.metrics.k_list):
            raise ConfigError("metrics.k_list values must be >= 1")
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def sha256(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def provenance(self) -> dict:
        return {"config_sha256": self.sha256(), "config": self.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        raw = path.read_bytes()
        if path.suffix.lower() == ".toml":
            doc = tomli.loads(raw.decode("utf-8"))
        else:
            doc = json.loads(raw)
        return cls.from_dict(doc)


def _build(kind, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be a table/object")
    known = {f.name: f for f in fields(kind)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    defaults = kind()
    kwargs = {}
    for name, value in doc.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}{name}.")
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return kind(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None
