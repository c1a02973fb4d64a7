"""
Experiment configuration: one YAML document describing datasets, models,
attacker hyper-parameters and evaluation options.

Library dataclasses carry the reference hyper-parameters; the desk preset only
overrides what a CPU-scale run needs (see ``DESK_CONFIG``).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .attack_core import LOSS_MODES
from .baselines import BaselineMethod, UapTrainConfig
from .ice import IceTrainConfig
from .models import ARCHITECTURES, TrainHParams
from .sine_attack import SineTrainConfig


class ConfigError(ValueError):
    """The configuration is malformed or references something unknown."""


@dataclass
class DatasetConfig:
    name: str
    kind: str = "desk"  # "desk" or "external"
    resolution: tuple = (32, 32)
    num_classes: int = 10
    samples_per_class: int = 150
    test_per_class: int = 20
    seed: int = 0
    noise_std: float = 4.0
    path: str | None = None  # external training split
    test_path: str | None = None  # external test split
    format: str | None = None  # archive | cifar | png-dir
    models: list = field(default_factory=lambda: ["vgg-mini"])

    def validate(self, role: str) -> None:
        if self.kind not in ("desk", "external"):
            raise ConfigError(f"{role} {self.name}: kind must be 'desk' or 'external'")
        if self.kind == "external" and not (self.path and self.format):
            raise ConfigError(f"{role} {self.name}: external datasets need 'path' and 'format'")
        if not self.models:
            raise ConfigError(f"{role} {self.name}: no models configured")
        for arch in self.models:
            if arch not in ARCHITECTURES:
                raise ConfigError(
                    f"{role} {self.name}: unknown architecture {arch!r}; "
                    f"registered: {sorted(ARCHITECTURES)}"
                )


@dataclass
class AttackOptions:
    epsilon: float = 15.0
    steps: int = 10
    loss_mode: str = "entropy"


@dataclass
class EvalOptions:
    max_images: int | None = None
    transfer_pairs: int = 100
    spectrum_samples: int = 3
    batch_size: int = 64


@dataclass
class ExperimentConfig:
    sources: list[DatasetConfig]
    target: DatasetConfig
    seed: int = 0
    attack_seed: int | None = None
    output_dir: str | None = None
    training: TrainHParams = field(default_factory=TrainHParams)
    attack: AttackOptions = field(default_factory=AttackOptions)
    ice: IceTrainConfig = field(default_factory=IceTrainConfig)
    sa: SineTrainConfig = field(default_factory=SineTrainConfig)
    uap: UapTrainConfig = field(default_factory=UapTrainConfig)
    baseline: BaselineMethod = field(default_factory=BaselineMethod)
    evaluation: EvalOptions = field(default_factory=EvalOptions)

    @property
    def effective_attack_seed(self) -> int:
        return self.seed if self.attack_seed is None else int(self.attack_seed)

    def validate(self) -> "ExperimentConfig":
        if not self.sources:
            raise ConfigError("at least one source dataset is required")
        names = [d.name for d in self.sources] + [self.target.name]
        if len(set(names)) != len(names):
            raise ConfigError(f"dataset names must be unique, got {names}")
        for d in self.sources:
            d.validate("source")
        self.target.validate("target")
        if self.attack.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.attack.epsilon}")
        if self.attack.steps < 1:
            raise ConfigError("attack.steps must be >= 1")
        if self.attack.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self, *sections: str) -> str:
        """SHA-256 over the canonical JSON of the whole config or selected sections."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# desk preset: two synthetic sources, one held-out target, four target architectures
DESK_CONFIG = {
    "seed": 0,
    "attack_seed": None,
    "output_dir": None,
    "sources": [
        {"name": "desk-a", "resolution": [32, 32], "num_classes": 10, "seed": 11,
         "models": ["vgg-mini"]},
        {"name": "desk-b", "resolution": [48, 48], "num_classes": 8, "seed": 12,
         "models": ["resnet-mini"]},
    ],
    "target": {"name": "desk-t", "resolution": [40, 40], "num_classes": 6, "seed": 13,
               "test_per_class": 25,
               "models": ["vgg-mini", "resnet-mini", "mobilenet-mini", "densenet-mini"]},
    "training": {"batch_size": 32, "epochs": 10},
    "ice": {"eps_c": 30.0, "learning_rate": 0.2, "step_rule": "normalized", "inner_steps": 2,
            "batch_size": 32, "block_widths": [8, 16, 32, 64]},
    "sa": {"step_rule": "normalized", "batch_size": 32},
    "uap": {"batch_size": 32},
}

# short schedules used by the acceptance ordering experiment
QUICK_OVERRIDES = {
    "ice": {"iterations": 150},
    "sa": {"iterations": 300},
    "uap": {"iterations": 300},
}

PRESETS = {"desk": {}, "quick": QUICK_OVERRIDES}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in raw.items():
        kwargs[k] = tuple(v) if k in ("resolution", "block_widths") and v is not None else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    if "sources" not in raw or "target" not in raw:
        raise ConfigError("config needs 'sources' and 'target'")
    cfg = ExperimentConfig(
        sources=[_build(DatasetConfig, d, f"sources[{i}]") for i, d in enumerate(raw["sources"])],
        target=_build(DatasetConfig, raw["target"], "target"),
        seed=int(raw.get("seed", 0)),
        attack_seed=raw.get("attack_seed"),
        output_dir=raw.get("output_dir"),
        training=_build(TrainHParams, raw.get("training"), "training"),
        attack=_build(AttackOptions, raw.get("attack"), "attack"),
        ice=_build(IceTrainConfig, raw.get("ice"), "ice"),
        sa=_build(SineTrainConfig, raw.get("sa"), "sa"),
        uap=_build(UapTrainConfig, raw.get("uap"), "uap"),
        baseline=_build(BaselineMethod, raw.get("baseline"), "baseline"),
        evaluation=_build(EvalOptions, raw.get("evaluation"), "evaluation"),
    )
    return cfg.validate()


def preset(name: str = "desk") -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return deep_merge(DESK_CONFIG, PRESETS[name])


def load_config(path=None, preset_name: str = "desk", overrides: dict | None = None):
    """Preset, then the YAML file on top, then explicit overrides."""
    raw = preset(preset_name)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = deep_merge(raw, doc)
    raw = deep_merge(raw, overrides or {})
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
