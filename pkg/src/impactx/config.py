"""Experiment configuration files.

The on-disk format is TOML: flat typed keys grouped in sections. Grammar::

    seed = 0                  # global seed for model init and training
    out = "runs/demo"         # output directory
    workers = 1               # explainer threads

    [data]
    kind = "synthetic"        # "synthetic" | "cifar10"
    path = ""                 # cifar10: directory of the binary batches
    seed = 0                  # synthetic: dataset seed
    image_size = 32
    patch_size = 6
    noise = 0.6
    contrast = 0.5
    n_train = 512
    n_test = 256

    [model]
    filters = [6, 16]
    hidden = [120, 84]
    latent_dim = 512
    decoder_seed_channels = 32
    classifier_hidden = 128

    [explainer]
    baseline = "dataset-mean" # or "constant"
    constant = 0.0
    grid = [8, 8]
    budget = 2000

    [train]
    batch_size = 32
    learning_rate = 0.001
    validation_fraction = 0.2
    lam = 1.0
    epochs_stage1 = 20
    epochs_stage2 = 20
    patience = 5
    optimizer = "adam"
    record_wall_time = false

    [train.grid]              # optional; each key lists the values to search
    lam = [0.1, 1.0, 10.0]

    [eval]
    n_samples = 50
    noise_seeds = 5
    step_regions = 1
    sources = ["decoder", "external-shap", "random"]

Unknown keys are rejected.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import SyntheticWatermarkConfig
from .errors import ConfigError
from .evaluation import SOURCES
from .explainer import MaskerConfig
from .models import BackboneSpec, ImpactxSpec
from .trainer import TrainConfig

SEARCHABLE = ("batch_size", "learning_rate", "validation_fraction", "lam")


@dataclass
class DataSection:
    kind: str = "synthetic"
    path: str = ""
    seed: int = 0
    image_size: int = 32
    patch_size: int = 6
    noise: float = 0.6
    contrast: float = 0.5
    n_train: int = 512
    n_test: int = 256


@dataclass
class ModelSection:
    filters: list[int] = field(default_factory=lambda: [6, 16])
    hidden: list[int] = field(default_factory=lambda: [120, 84])
    latent_dim: int = 512
    decoder_seed_channels: int = 32
    classifier_hidden: int = 128


@dataclass
class ExplainerSection:
    baseline: str = "dataset-mean"
    constant: float = 0.0
    grid: list[int] = field(default_factory=lambda: [8, 8])
    budget: int = 2000


@dataclass
class TrainSection:
    batch_size: int = 32
    learning_rate: float = 1e-3
    validation_fraction: float = 0.2
    lam: float = 1.0
    epochs_stage1: int = 20
    epochs_stage2: int = 20
    patience: int = 5
    optimizer: str = "adam"
    record_wall_time: bool = False
    grid: dict[str, list] = field(default_factory=dict)


@dataclass
class EvalSection:
    n_samples: int = 50
    noise_seeds: int = 5
    step_regions: int = 1
    sources: list[str] = field(default_factory=lambda: list(SOURCES))


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    explainer: ExplainerSection = field(default_factory=ExplainerSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if self.data.kind not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown dataset kind {self.data.kind!r}")
        if self.data.kind == "cifar10" and not Path(self.data.path).is_dir():
            raise ConfigError(f"cifar10 path {self.data.path!r} is not a directory")
        if self.explainer.budget < 1:
            raise ConfigError("explainer budget must be positive")
        for key in self.train.grid:
            if key not in SEARCHABLE:
                raise ConfigError(f"grid search over {key!r} unsupported; choose from {SEARCHABLE}")
        for s in self.eval.sources:
            if s not in SOURCES:
                raise ConfigError(f"unknown map source {s!r}")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        self.synthetic_config().validate() if self.data.kind == "synthetic" else None
        self.masker_config()
        self.train_config().validate()

    # -- derived objects ----------------------------------------------------

    def synthetic_config(self) -> SyntheticWatermarkConfig:
        d = self.data
        s, p = d.image_size, d.patch_size
        # one patch per class, each inside a single cell of a 4x4 grid
        cell = s // 4
        positions = ((cell + 1, cell + 1), (2 * cell + 1, 2 * cell + 1))
        return SyntheticWatermarkConfig(s, 3, p, positions, d.noise, d.contrast, d.n_train, d.n_test, d.seed)

    def model_spec(self, num_classes: int, input_shape) -> ImpactxSpec:
        m = self.model
        backbone = BackboneSpec(tuple(input_shape), tuple(m.filters), tuple(m.hidden), num_classes)
        return ImpactxSpec(backbone, m.latent_dim, m.decoder_seed_channels, None, m.classifier_hidden)

    def masker_config(self) -> MaskerConfig:
        e = self.explainer
        return MaskerConfig(e.baseline, e.constant, tuple(e.grid))

    def train_config(self, **overrides) -> TrainConfig:
        t = self.train
        cfg = TrainConfig(t.batch_size, t.learning_rate, t.validation_fraction, t.lam, t.epochs_stage1,
                          t.epochs_stage2, t.patience, t.optimizer, self.seed, True, dict(t.grid))
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    def digest(self) -> str:
        """Hash of everything that affects results (not ``out`` or ``workers``)."""
        payload = asdict(self)
        payload.pop("out")
        payload.pop("workers")
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _fill(cls, raw: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    obj = cls()
    for key, value in raw.items():
        default = getattr(obj, key)
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"[{where}] {key} must be a boolean")
        if isinstance(default, int) and not isinstance(default, bool) and not isinstance(value, int):
            raise ConfigError(f"[{where}] {key} must be an integer")
        if isinstance(default, float) and not isinstance(value, (int, float)):
            raise ConfigError(f"[{where}] {key} must be a number")
        if isinstance(default, float):
            value = float(value)
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"[{where}] {key} must be a string")
        if isinstance(default, list) and not isinstance(value, list):
            raise ConfigError(f"[{where}] {key} must be an array")
        setattr(obj, key, value)
    return obj


SECTIONS = {"data": DataSection, "model": ModelSection, "explainer": ExplainerSection,
            "train": TrainSection, "eval": EvalSection}


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    top = {k: v for k, v in raw.items() if k not in SECTIONS}
    cfg = _fill(ExperimentConfig, top, "top level")
    for name, cls in SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        setattr(cfg, name, _fill(cls, section, name))
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
