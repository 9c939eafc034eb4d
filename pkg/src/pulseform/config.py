"""One JSON document holding every stage's settings.

Each section maps onto the owning module's config type and is validated by
it at load time. Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .errors import InvalidConfig, IoFailure, PulseformError
from .model import ModelConfig
from .preprocess import BandpassSpec, CleaningPolicy
from .segmentation import FrameQualityPolicy
from .training import TrainConfig


@dataclass(frozen=True)
class PreprocessSettings:
    maf_window: int = 5
    maf_passes: int = 1

    def validate(self):
        if self.maf_window < 1 or self.maf_passes < 1:
            raise InvalidConfig("maf_window and maf_passes must be at least 1")


@dataclass(frozen=True)
class SegmentationSettings:
    min_distance_s: float = 0.3
    frame_len_s: float = 10.0
    amp_mean_low: Optional[float] = None
    amp_mean_high: Optional[float] = None
    rel_low: float = 0.2
    rel_high: float = 5.0

    def frame_policy(self):
        return FrameQualityPolicy(self.frame_len_s, self.amp_mean_low, self.amp_mean_high, self.rel_low, self.rel_high)

    def validate(self):
        if not self.min_distance_s > 0:
            raise InvalidConfig("min_distance_s must be positive")
        self.frame_policy().validate()


@dataclass(frozen=True)
class SyntheticSettings:
    n_records: int = 20
    duration_s: float = 960.0
    noise_std: float = 0.02
    drift: float = 0.05
    hr_jitter_bpm: float = 1.0

    def validate(self):
        if self.n_records < 1:
            raise InvalidConfig("n_records must be at least 1")
        if not self.duration_s > 0:
            raise InvalidConfig("duration_s must be positive")
        if self.noise_std < 0 or self.drift < 0 or self.hr_jitter_bpm < 0:
            raise InvalidConfig("noise_std, drift and hr_jitter_bpm must be >= 0")


@dataclass(frozen=True)
class PathSettings:
    out_dir: str = "run"
    records_dir: Optional[str] = None

    def validate(self):
        pass


_SECTIONS = {
    "cleaning": CleaningPolicy,
    "bandpass": BandpassSpec,
    "preprocess": PreprocessSettings,
    "segmentation": SegmentationSettings,
    "model": ModelConfig,
    "train": TrainConfig,
    "synthetic": SyntheticSettings,
    "paths": PathSettings,
}


@dataclass(frozen=True)
class PipelineConfig:
    cleaning: CleaningPolicy = field(default_factory=CleaningPolicy)
    bandpass: BandpassSpec = field(default_factory=BandpassSpec)
    preprocess: PreprocessSettings = field(default_factory=PreprocessSettings)
    segmentation: SegmentationSettings = field(default_factory=SegmentationSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)
    paths: PathSettings = field(default_factory=PathSettings)
    seed: int = 0

    def validate(self):
        if int(self.seed) != self.seed or self.seed < 0:
            raise InvalidConfig("seed must be a non-negative integer")
        for name in _SECTIONS:
            section = getattr(self, name)
            if hasattr(section, "validate"):
                section.validate()
        return self

    def with_seed(self, seed):
        """Copy with ``seed`` applied globally (pipeline and training)."""
        return replace(self, seed=int(seed), train=replace(self.train, seed=int(seed)))

    def to_json(self):
        doc = {name: _section_json(getattr(self, name)) for name in _SECTIONS}
        doc["seed"] = self.seed
        return doc

    def canonical(self):
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


def _section_json(obj):
    if hasattr(obj, "to_json"):
        return obj.to_json()
    return asdict(obj)


def _build_section(name, cls, obj):
    if not isinstance(obj, dict):
        raise InvalidConfig(f"section {name!r} must be a JSON object")
    unknown = set(obj) - {f.name for f in fields(cls)}
    if unknown:
        raise InvalidConfig(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**obj)
    except PulseformError:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"section {name!r}: {exc}") from exc


def config_from_dict(doc):
    if not isinstance(doc, dict):
        raise InvalidConfig("config must be a JSON object")
    unknown = set(doc) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise InvalidConfig(f"unknown top-level config keys {sorted(unknown)}")
    kwargs = {name: _build_section(name, cls, doc[name]) for name, cls in _SECTIONS.items() if name in doc}
    if "seed" in doc:
        kwargs["seed"] = doc["seed"]
    cfg = PipelineConfig(**kwargs)
    if "seed" in doc and "seed" not in doc.get("train", {}):
        cfg = cfg.with_seed(doc["seed"])
    return cfg.validate()


def load_config(path):
    """Read and validate a pipeline config file; ``None`` gives the defaults."""
    if path is None:
        return PipelineConfig().validate()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read config: {exc}", path=str(path)) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config is not valid JSON: {exc}", path=str(path)) from exc
    return config_from_dict(doc)
