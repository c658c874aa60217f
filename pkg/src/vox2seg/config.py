"""Run configuration: every sub-config in one YAML file.

Precedence, lowest to highest: dataclass defaults, the YAML file passed with
``--config``, then command-line flags. The device falls back to the
``VOX2SEG_DEVICE`` environment variable when no flag is given.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentationConfig
from .ensemble import EnsemblerConfig
from .loss import LossConfig
from .model import DiscriminatorConfig, GeneratorConfig
from .train import TrainConfig


@dataclass
class PostprocessConfig:
    et_threshold: int = 1000
    min_cluster: int = 0
    cluster_label: int = 4
    cluster_replacement: int = 1
    connectivity: int = 26

    def __post_init__(self):
        if self.connectivity not in (6, 18, 26):
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.et_threshold < 0 or self.min_cluster < 0:
            raise ValueError("thresholds must be nonnegative")


@dataclass
class SynthConfig:
    n_subjects: int = 16
    size: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0


@dataclass
class RunConfig:
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensembler: EnsemblerConfig = field(default_factory=EnsemblerConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data_dir: str | None = None
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.loss.alpha != self.train.alpha:
            raise ValueError(f"alpha set inconsistently: loss {self.loss.alpha} vs train {self.train.alpha}")
        if self.generator.depth != self.discriminator.depth:
            raise ValueError("generator and discriminator depth must match")
        if self.augmentation.patch_size != self.train.patch_size:
            raise ValueError("augmentation and train patch sizes differ")
        if any(p % 2 ** self.generator.depth for p in self.train.patch_size):
            raise ValueError(f"patch size {self.train.patch_size} not divisible by "
                             f"2^{self.generator.depth}")
        if self.ensembler.models != self.train.folds:
            raise ValueError("ensembler model count must equal the fold count")
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values: dict | None):
    values = dict(values or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    return cls(**values)


_SECTIONS = {f.name for f in dataclasses.fields(RunConfig)}
_CLASSES = {
    "augmentation": AugmentationConfig, "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig, "loss": LossConfig, "train": TrainConfig,
    "ensembler": EnsemblerConfig, "postprocess": PostprocessConfig, "synth": SynthConfig,
}


def from_dict(d: dict) -> RunConfig:
    d = dict(d or {})
    unknown = set(d) - _SECTIONS
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    # alpha may be given in either section; a single value drives both
    loss = dict(d.get("loss") or {})
    train = dict(d.get("train") or {})
    if "alpha" in loss and "alpha" not in train:
        train["alpha"] = loss["alpha"]
    elif "alpha" in train and "alpha" not in loss:
        loss["alpha"] = train["alpha"]
    d["loss"], d["train"] = loss, train
    # patch size and fold count likewise propagate from the train section
    aug = dict(d.get("augmentation") or {})
    ens = dict(d.get("ensembler") or {})
    if "patch_size" in train:
        aug.setdefault("patch_size", train["patch_size"])
        ens.setdefault("patch_size", train["patch_size"])
    if "folds" in train:
        ens.setdefault("models", train["folds"])
    d["augmentation"], d["ensembler"] = aug, ens

    kwargs = {name: _build(cls, d.get(name)) for name, cls in _CLASSES.items()}
    for key in ("data_dir", "out_dir"):
        if key in d:
            kwargs[key] = d[key]
    return RunConfig(**kwargs).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {p} must hold a mapping")
    return from_dict(data)


def apply_overrides(cfg: RunConfig, seed: int | None = None, alpha: float | None = None,
                    epochs: int | None = None, device: str | None = None,
                    out_dir: str | None = None, data_dir: str | None = None) -> RunConfig:
    d = cfg.to_dict()
    if seed is not None:
        for section in ("train", "ensembler", "augmentation", "synth"):
            d[section]["seed"] = seed
    if alpha is not None:
        d["train"]["alpha"] = d["loss"]["alpha"] = alpha
    if epochs is not None:
        d["train"]["epochs"] = epochs
    device = device or os.environ.get("VOX2SEG_DEVICE")
    if device:
        d["train"]["device"] = device
    if out_dir is not None:
        d["out_dir"] = out_dir
    if data_dir is not None:
        d["data_dir"] = data_dir
    return from_dict(d)
