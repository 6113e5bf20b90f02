"""Single-file run configuration (JSON) with strict keys and a full echo.

Every section is optional; missing keys take the defaults below.  Unknown
keys anywhere are rejected so a typo cannot silently fall back to a
default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import experiments, fcn, metrics, pipeline, synth
from .losses import LOSS_NAMES, LossConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StainConfig:
    mode: str = "fit"                 # fit | none | path to a stain-model file
    sparsity_weight: float = 0.1
    iters: int = 300
    seed: int = 0
    use_tissue_filter: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    loss_name: str = "switching"
    loss: LossConfig = field(default_factory=LossConfig)
    model: fcn.UNetSpec = field(default_factory=lambda: experiments.Protocol().unet)
    train: fcn.TrainConfig = field(default_factory=lambda: experiments.Protocol().train)
    augment: fcn.AugmentationConfig | None = field(default_factory=lambda: experiments.Protocol().augment)
    grid: pipeline.PatchGrid = field(default_factory=pipeline.PatchGrid)
    post: pipeline.PostprocessConfig = field(default_factory=pipeline.PostprocessConfig)
    match: str = "inside_mask"
    stain: StainConfig = field(default_factory=StainConfig)
    shrink_fraction: float = 0.25
    scene: synth.SceneSpec = field(default_factory=lambda: experiments.Protocol().scene)
    n_train: int = 200
    n_test: int = 50

    def __post_init__(self):
        if self.loss_name not in LOSS_NAMES:
            raise ConfigError(f"loss_name must be one of {LOSS_NAMES}, got {self.loss_name!r}")
        metrics.MatchCriterion.parse(self.match)
        if not 0 < self.shrink_fraction <= 1:
            raise ConfigError(f"shrink_fraction must be in (0, 1], got {self.shrink_fraction}")

    @property
    def criterion(self) -> metrics.MatchCriterion:
        return metrics.MatchCriterion.parse(self.match)

    def slide_config(self) -> pipeline.SlideConfig:
        s = self.stain
        return pipeline.SlideConfig(self.grid, self.post, s.mode, s.use_tissue_filter, s.seed,
                                    s.sparsity_weight, s.iters)

    def protocol(self) -> experiments.Protocol:
        return experiments.Protocol(scene=self.scene, n_train=self.n_train, n_test=self.n_test,
                                    shrink_fraction=self.shrink_fraction, unet=self.model,
                                    train=replace(self.train, seed=self.seed), augment=self.augment,
                                    post=self.post, criterion=self.criterion)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


_SECTIONS = {
    "loss": LossConfig, "model": fcn.UNetSpec, "train": fcn.TrainConfig,
    "augment": fcn.AugmentationConfig, "grid": pipeline.PatchGrid,
    "post": pipeline.PostprocessConfig, "stain": StainConfig, "scene": synth.SceneSpec,
}
_TUPLE_FIELDS = {"rotations", "flips", "count_range", "radius_range"}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{where}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{where}' section: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = None if (key == "augment" and value is None) else _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(data)


def echo(cfg: RunConfig) -> str:
    """The effective configuration, every default spelled out."""
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
