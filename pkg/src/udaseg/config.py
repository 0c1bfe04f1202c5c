"""Pipeline configuration: nested dataclasses with JSON round-trip and a stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigurationError
from .mean_teacher import MtConfig
from .phantom import PhantomParams
from .segmentation import SegTrainConfig
from .translation.cutseg import CutSegConfig
from .translation.train import TranslationConfig

LR_RANGE = (1e-6, 1e-2)

# most common target-domain spacing, as published: x, y, z in mm
TARGET_SPACING_XYZ = (0.46875, 0.468975, 1.5)


@dataclass
class DataConfig:
    source: str = "phantom"  # "phantom" or "directory"
    root: str | None = None  # case directory when source == "directory"
    n_cases: int = 20
    n_test: int = 5
    test_seed_offset: int = 100_000
    phantom: dict = field(default_factory=dict)  # PhantomParams overrides
    target_spacing: tuple[float, float, float] = TARGET_SPACING_XYZ
    resample: bool = True

    def spacing_zyx(self) -> tuple[float, float, float]:
        return tuple(float(s) for s in reversed(self.target_spacing))

    def phantom_params(self) -> PhantomParams:
        base = PhantomParams().to_dict()
        base.update(self.phantom)
        return PhantomParams.from_dict(base)


@dataclass
class RoiConfig:
    size: int = 24
    radius: int = 4
    atlas_case: str | None = None  # default: first training case
    origin: tuple[int, int, int] | None = None  # default: centred on the atlas foreground
    bilateral: bool = False


@dataclass
class TranslationSection:
    cyclegan2d: TranslationConfig = field(default_factory=lambda: TranslationConfig(epochs=24))
    cyclegan3d: TranslationConfig = field(
        default_factory=lambda: TranslationConfig(epochs=8, base_width=8, disc_width=8))
    # CUT pretraining length comes from cutseg.pretrain_epochs
    cut: TranslationConfig = field(default_factory=lambda: TranslationConfig(base_width=8, disc_width=8))
    harvest_last: int = 3
    pseudo_modes: tuple[str, ...] = ("cyclegan2d", "cyclegan3d")


@dataclass
class FinetuneConfig:
    epochs: int = 2
    lr: float = 5e-5
    weight_decay: float = 1e-4
    intensity_augment: bool = True
    max_steps_per_epoch: int | None = None


@dataclass
class CutSegSection:
    train: CutSegConfig = field(default_factory=CutSegConfig)
    pretrain_epochs: int = 20


@dataclass
class FusionConfig:
    order: tuple[int, int, int] = (0, 1, 2)
    scope: str = "volume"


@dataclass
class PostprocessConfig:
    z_threshold: float = 15
    connectivity: int = 26
    z_sign: int = 1


@dataclass
class EvalConfig:
    classes: tuple[str, ...] = ("VS", "Cochlea")


@dataclass
class BaselineConfig:
    epochs: int = 12
    lr: float = 5e-4
    weight_decay: float = 1e-4
    intensity_augment: bool = False


@dataclass
class PipelineConfig:
    seed: int = 0
    deterministic: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    translation: TranslationSection = field(default_factory=TranslationSection)
    segmentation: SegTrainConfig = field(default_factory=SegTrainConfig)
    mean_teacher: MtConfig = field(default_factory=MtConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    cutseg: CutSegSection = field(default_factory=CutSegSection)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        self.sync_seeds()

    def sync_seeds(self):
        """Every training section follows the top-level seed."""
        for sec in (self.translation.cyclegan2d, self.translation.cyclegan3d, self.translation.cut,
                    self.segmentation, self.mean_teacher, self.cutseg.train):
            sec.seed = self.seed

    def with_seed(self, seed: int) -> "PipelineConfig":
        cfg = from_dict(to_dict(self))
        cfg.seed = int(seed)
        cfg.sync_seeds()
        return cfg

    def learning_rates(self) -> dict[str, float]:
        return {
            "translation.cyclegan2d.lr": self.translation.cyclegan2d.lr,
            "translation.cyclegan3d.lr": self.translation.cyclegan3d.lr,
            "translation.cut.lr": self.translation.cut.lr,
            "segmentation.lr": self.segmentation.lr,
            "mean_teacher.lr": self.mean_teacher.lr,
            "finetune.lr": self.finetune.lr,
            "cutseg.train.lr": self.cutseg.train.lr,
            "baseline.lr": self.baseline.lr,
        }

    def validate(self) -> "PipelineConfig":
        lo, hi = LR_RANGE
        for name, lr in self.learning_rates().items():
            if not lo <= lr <= hi:
                raise ConfigurationError(f"{name}={lr} outside the searched range [{lo}, {hi}]")
        if self.data.source not in ("phantom", "directory"):
            raise ConfigurationError(f"unknown data source {self.data.source!r}")
        if self.data.source == "directory" and not self.data.root:
            raise ConfigurationError("data.root is required when data.source is 'directory'")
        if self.data.source == "phantom" and (self.data.n_cases < 2 or self.data.n_test < 1):
            raise ConfigurationError("need at least 2 training phantoms and 1 test phantom")
        if len(self.data.target_spacing) != 3 or min(self.data.target_spacing) <= 0:
            raise ConfigurationError("target_spacing must be three positive values")
        if self.roi.size < 4 or self.roi.radius < 0:
            raise ConfigurationError("ROI size must be >= 4 and radius >= 0")
        if sorted(self.fusion.order) != [0, 1, 2]:
            raise ConfigurationError(f"fusion order must be a permutation of 0,1,2: {self.fusion.order}")
        if self.fusion.scope not in ("volume", "dataset"):
            raise ConfigurationError(f"unknown fusion scope {self.fusion.scope!r}")
        if self.postprocess.connectivity not in (6, 26):
            raise ConfigurationError("connectivity must be 6 or 26")
        if self.postprocess.z_sign not in (1, -1):
            raise ConfigurationError("z_sign must be +1 or -1")
        for mode in self.translation.pseudo_modes:
            if mode not in ("cyclegan2d", "cyclegan3d", "cut"):
                raise ConfigurationError(f"unknown pseudo-image mode {mode!r}")
        if not self.translation.pseudo_modes:
            raise ConfigurationError("at least one pseudo-image mode is required")
        if self.cutseg.train.resolution_comparison not in ("spacing_gt", "spacing_lt"):
            raise ConfigurationError("cutseg resolution_comparison must be spacing_gt or spacing_lt")
        if self.segmentation.batch_size != 1:
            raise ConfigurationError("only batch size 1 is supported")
        self.data.phantom_params().validate()
        return self

    def hash(self) -> str:
        return config_hash(to_dict(self))


# ---------------------------------------------------------------------------
# serialisation


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    return obj


def to_dict(cfg) -> dict:
    return _plain(cfg)


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {path or 'config'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, sub)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        elif name == "origin" and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad value in {path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def config_hash(data: dict) -> str:
    """sha256 of the canonical JSON form; independent of key order."""
    blob = json.dumps(_plain(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data).validate()


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=1, sort_keys=True))


__all__ = ["PipelineConfig", "DataConfig", "RoiConfig", "TranslationSection", "FinetuneConfig", "CutSegSection",
           "FusionConfig", "PostprocessConfig", "EvalConfig", "BaselineConfig", "to_dict", "from_dict",
           "config_hash", "load_config", "save_config", "LR_RANGE", "TARGET_SPACING_XYZ"]
