"""Experiment configuration: flat ``section.key = value`` text files.

The on-disk syntax is the dotted-key subset of TOML, so any TOML reader can
parse it; :func:`dumps` writes the canonical form (fixed key order, one
assignment per line, unset optional values omitted).
"""
from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union, get_args, get_origin, get_type_hints

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .poison import AugmentConfig, PoisonConfig
from .training import TrainConfig


@dataclass
class WarpSection:
    k: int = 4
    s: float = 0.5
    seed: Optional[int] = None


@dataclass
class PoisonSection:
    rho_a: float = 0.1
    rho_n: float = 0.2
    target_rule: str = "all-to-one"
    target_class: int = 0
    fixed_subset: bool = False
    seed: Optional[int] = None


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.01
    decay_epochs: int = 100
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    dropout: float = 0.5
    patience: Optional[int] = None
    eval_every: int = 1
    augment: bool = True
    crop_padding: int = 2
    max_rotation_deg: float = 10.0
    augment_interpolation: str = "nearest"
    rotation_prob: float = 1.0
    train_subset: int = 0
    seed: Optional[int] = None


@dataclass
class EvalSection:
    test_subset: int = 0
    seed: Optional[int] = None


@dataclass
class DefenseSection:
    neural_cleanse: bool = False
    fine_pruning: bool = False
    strip: bool = False
    spectral: bool = False
    nc_steps: int = 500
    nc_batch_size: int = 32
    nc_step_size: float = 0.1
    nc_optimizer: str = "adam"
    nc_clean_size: int = 2000
    strip_inputs: int = 2000
    strip_overlays: int = 100
    spectral_clean: int = 5000
    spectral_backdoor: int = 1172
    pruning_eval_size: int = 0
    seed: Optional[int] = None


NUM_CLASSES = 10  # both supported datasets

SECTIONS = {
    "warp": WarpSection,
    "poison": PoisonSection,
    "train": TrainSection,
    "eval": EvalSection,
    "defense": DefenseSection,
}


@dataclass
class ExperimentConfig:
    name: str = "run"
    dataset: str = "mnist"
    data_dir: str = "data/mnist"
    output_dir: str = "runs/default"
    seed: int = 0
    warp: WarpSection = field(default_factory=WarpSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    defense: DefenseSection = field(default_factory=DefenseSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dataset not in ("mnist", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if int(self.warp.k) < 2 or self.warp.s < 0:
            raise ConfigError("warp.k must be >= 2 and warp.s >= 0")
        if not 0 <= self.poison.target_class < NUM_CLASSES:
            raise ConfigError(f"poison.target_class must be in [0, {NUM_CLASSES})")
        if self.poisoned:
            self.poison_config()  # PoisonConfig checks its own invariants
        elif self.poison.rho_n != 0:
            raise ConfigError("poison.rho_n must be 0 when poison.rho_a is 0")
        if self.train.epochs < 0 or self.train.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        if not 0 <= self.train.dropout < 1:
            raise ConfigError("train.dropout must be in [0, 1)")
        self.augment_config()

    @property
    def poisoned(self) -> bool:
        return self.poison.rho_a > 0

    def sub_seed(self, section: str) -> int:
        explicit = getattr(getattr(self, section), "seed")
        if explicit is not None:
            return int(explicit)
        tag = sorted(SECTIONS).index(section) + 1
        return int(np.random.SeedSequence([int(self.seed), tag]).generate_state(1)[0])

    def poison_config(self) -> PoisonConfig:
        p = self.poison
        return PoisonConfig(rho_a=p.rho_a, rho_n=p.rho_n, target_rule=p.target_rule, target_class=p.target_class,
                            k=self.warp.k, s=self.warp.s, seed=self.sub_seed("poison"), fixed_subset=p.fixed_subset)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
                           decay_epochs=t.decay_epochs, decay_factor=t.decay_factor, momentum=t.momentum,
                           weight_decay=t.weight_decay, seed=self.sub_seed("train"), eval_every=t.eval_every,
                           patience=t.patience)

    def augment_config(self) -> AugmentConfig:
        t = self.train
        return AugmentConfig(enabled=t.augment, crop_padding=t.crop_padding, max_rotation_deg=t.max_rotation_deg,
                             interpolation=t.augment_interpolation, rotation_prob=t.rotation_prob)


def _coerce(value: Any, annotation, key: str):
    optional = get_origin(annotation) is Union and type(None) in get_args(annotation)
    base = next(a for a in get_args(annotation) if a is not type(None)) if optional else annotation
    try:
        if base is bool:
            if isinstance(value, bool):
                return value
            raise TypeError
        if base is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if base is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if base is str:
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"config key {key!r}: cannot interpret {value!r} as {getattr(base, '__name__', base)}")


def _flatten(doc: dict, prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def from_dict(values: Dict[str, Any]) -> ExperimentConfig:
    """Build a config from flat dotted keys; unknown keys are rejected."""
    top_hints = get_type_hints(ExperimentConfig)
    top: Dict[str, Any] = {}
    sections: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
    for key, value in values.items():
        head, _, rest = key.partition(".")
        if rest:
            if head not in SECTIONS:
                raise ConfigError(f"unknown config section {head!r}")
            hints = get_type_hints(SECTIONS[head])
            if rest not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            sections[head][rest] = _coerce(value, hints[rest], key)
        else:
            if head not in top_hints or head in SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            top[head] = _coerce(value, top_hints[head], key)
    built = {name: cls(**sections[name]) for name, cls in SECTIONS.items()}
    return ExperimentConfig(**top, **built)


def loads(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return from_dict(_flatten(doc))


def load(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return loads(path.read_text(encoding="utf-8"))


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ConfigError(f"non-finite config value {value}")
        return repr(value)
    text = str(value).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{text}"'


def to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for sub in dataclasses.fields(value):
                flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            flat[f.name] = value
    return flat


def dumps(cfg: ExperimentConfig) -> str:
    lines = [f"{key} = {_format_value(value)}" for key, value in to_dict(cfg).items() if value is not None]
    return "\n".join(lines) + "\n"


def dump(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def with_overrides(cfg: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    values = to_dict(cfg)
    values.update(overrides)
    return from_dict({k: v for k, v in values.items() if v is not None})
