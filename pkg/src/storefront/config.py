"""Run configuration: one JSON document with a section per component.

Unknown sections or keys are rejected so that typos cannot silently fall
back to defaults.  Every seed is an explicit integer.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .experiment import DataConfig, ModelConfig, PriorConfig
from .geometry import CropPlanConfig
from .loss import LossConfig
from .model import PostClassifierConfig, TrainConfig
from .pipeline import PipelineConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectConfig:
    use_calibrated_threshold: bool = True
    overlay: bool = False


@dataclass(frozen=True)
class EvalConfig:
    iou: float = 0.5
    budgets: tuple[int, ...] = (37,)
    precisions: tuple[float, ...] = (0.895,)


@dataclass(frozen=True)
class GeoConfig:
    epsilon_m: float = 5.0
    facade_range_m: float = 10.0


@dataclass(frozen=True)
class BenchConfig:
    scales: tuple[int, ...] = (1, 2, 3)


@dataclass(frozen=True)
class PathsConfig:
    """Input/output locations; ``None`` means a default under ``--out``."""

    data_dir: str | None = None
    priors: str | None = None
    model_dir: str | None = None
    detections_dir: str | None = None


_SECTIONS = {
    "data": DataConfig,
    "priors": PriorConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "pipeline": PipelineConfig,
    "postclassifier": PostClassifierConfig,
    "detect": DetectConfig,
    "eval": EvalConfig,
    "geo": GeoConfig,
    "bench": BenchConfig,
    "paths": PathsConfig,
}


def _build(cls, values: dict, section: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kw = {}
    for k, v in values.items():
        default = getattr(cls(), k)
        if isinstance(default, tuple):
            v = tuple(v) if isinstance(v, (list, tuple)) else (v,)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"[{section}] {k} must be true or false")
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"[{section}] {k} must be an integer")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"[{section}] {k} must be a number")
            v = float(v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _dump(obj) -> dict:
    return {f.name: list(v) if isinstance(v := getattr(obj, f.name), tuple) else v
            for f in dataclasses.fields(obj)}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    priors: PriorConfig = PriorConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    loss: LossConfig = LossConfig()
    crop_plan: CropPlanConfig = field(default_factory=CropPlanConfig)
    pipeline: PipelineConfig = PipelineConfig()
    postclassifier: PostClassifierConfig = PostClassifierConfig()
    detect: DetectConfig = DetectConfig()
    eval: EvalConfig = EvalConfig()
    geo: GeoConfig = GeoConfig()
    bench: BenchConfig = BenchConfig()
    paths: PathsConfig = PathsConfig()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - set(_SECTIONS) - {"crop_plan"})
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        kw = {}
        for name, section_cls in _SECTIONS.items():
            values = d.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"section [{name}] must be an object")
            kw[name] = _build(section_cls, values, name)
        if "crop_plan" in d:
            plan = d["crop_plan"]
            if not isinstance(plan, dict) or set(plan) - {"scales", "min_overlap"} or "scales" not in plan:
                raise ConfigError("[crop_plan] needs 'scales' and optionally 'min_overlap' only")
            try:
                kw["crop_plan"] = CropPlanConfig.from_dict(plan)
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigError(f"[crop_plan] {exc}") from exc
        return cls(**kw)

    def to_dict(self) -> dict:
        d = {name: _dump(getattr(self, name)) for name in _SECTIONS}
        d["crop_plan"] = self.crop_plan.to_dict()
        return d

    def with_overrides(self, assignments) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON when
        possible and as plain strings otherwise."""
        d = self.to_dict()
        for item in assignments:
            path, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            keys = path.strip().split(".")
            node = d
            for k in keys[:-1]:
                if not isinstance(node, dict) or k not in node:
                    raise ConfigError(f"unknown config key {path!r}")
                node = node[k]
            if not isinstance(node, dict) or keys[-1] not in node:
                raise ConfigError(f"unknown config key {path!r}")
            node[keys[-1]] = value
        return RunConfig.from_dict(d)


def default_config() -> RunConfig:
    text = resources.files("storefront").joinpath("default_config.json").read_text()
    return RunConfig.from_dict(json.loads(text))


def load_config(path=None, overrides=()) -> RunConfig:
    if path is None:
        cfg = default_config()
    else:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        cfg = RunConfig.from_dict(data)
    return cfg.with_overrides(overrides)
