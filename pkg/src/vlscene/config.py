"""Experiment configuration: INI-style sections of ``key = value`` pairs,
parsed strictly (unknown sections or keys are errors)."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import get_type_hints

from .losses import LossWeights
from .scene import CLASS_NAMES, SceneSpec
from .view import CameraModel, VoxelGridSpec, forward_looking_pose, uniform_depth_bins


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    precision: str = "float32"
    deterministic: bool = True
    out_dir: str = "runs/default"


@dataclass
class DataSection:
    dataset_dir: str = "data/reference"
    num_scenes: int = 16
    dataset_seed: int = 7
    n_boxes: int = 3
    n_poles: int = 3
    image_noise: float = 0.05
    teacher_noise: float = 0.3
    teacher_size: tuple = (16, 16)
    ignore_outside_view: bool = True


@dataclass
class GridSection:
    # Feature-volume grid; labels live on a grid twice as fine.
    extents: tuple = (16, 16, 4)
    voxel_size: float = 0.5
    origin: tuple = (0.0, 0.0, 0.0)


@dataclass
class CameraSection:
    height: int = 32
    width: int = 32
    fx: float = 20.0
    fy: float = 20.0
    cx: float = 16.0
    cy: float = 16.0
    position: tuple = (0.0, 4.0, 1.2)
    depth_min: float = 1.0
    depth_max: float = 9.0
    depth_bins: int = 8


@dataclass
class ModelSection:
    image_channels: int = 8
    channels: int = 16
    head_hidden: int = 16
    teacher_channels: int = 8
    num_classes: int = 4
    ssi_widths: tuple = (32, 64)
    ngp_repeats: int = 1
    sparsify_threshold: float = 0.0
    detach_fusion_target: bool = True
    hard_pseudo_labels: bool = False
    skip_mode: str = "add"


@dataclass
class ToggleSection:
    enable_vlgd: bool = True
    enable_ngp: bool = True
    enable_ssi: bool = True
    enable_kd_feat: bool = True
    enable_kd_logits: bool = True


@dataclass
class LossSection:
    lambda_ssc: float = 1.0
    lambda_kd: float = 1.0
    w_sem_scal: float = 1.0
    w_geo_scal: float = 1.0
    w_ce: float = 1.0
    w_depth: float = 1.0
    w_kd_feat: float = 1.0
    w_kd_logits: float = 1.0
    ce_class_weights: tuple = ()
    soft_depth_targets: bool = False
    count_absent_as_zero: bool = False

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_ssc, self.lambda_kd, self.w_sem_scal, self.w_geo_scal, self.w_ce,
                           self.w_depth, self.w_kd_feat, self.w_kd_logits)


@dataclass
class OptimSection:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 200
    batch_size: int = 2
    milestones: tuple = (0.75, 0.9)
    gamma: float = 0.3


@dataclass
class EvalSection:
    ranges: tuple = (0.25, 0.5, 1.0)


_SECTIONS = {
    "run": RunSection, "data": DataSection, "grid": GridSection, "camera": CameraSection,
    "model": ModelSection, "toggles": ToggleSection, "loss": LossSection, "optim": OptimSection,
    "eval": EvalSection,
}
# Sections that do not affect numerics; excluded from the config hash.
_PATH_KEYS = {("run", "out_dir"), ("data", "dataset_dir")}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    grid: GridSection = field(default_factory=GridSection)
    camera: CameraSection = field(default_factory=CameraSection)
    model: ModelSection = field(default_factory=ModelSection)
    toggles: ToggleSection = field(default_factory=ToggleSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if any(e % 4 for e in self.grid.extents):
            raise ConfigError(f"grid extents {self.grid.extents} must be divisible by 4")
        if self.run.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.run.precision!r}")
        if self.model.skip_mode != "add":
            raise ConfigError("only additive skip connections are implemented (skip_mode = add)")
        if self.model.num_classes != len(CLASS_NAMES):
            raise ConfigError(f"the scene generator emits {len(CLASS_NAMES)} classes")
        if self.model.image_channels < 3:
            raise ConfigError("image_channels must be >= 3")
        if self.optim.steps < 0 or self.optim.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.optim.batch_size > self.data.num_scenes:
            raise ConfigError("batch_size exceeds num_scenes")
        if not all(0 < r <= 1 for r in self.eval.ranges):
            raise ConfigError("eval ranges must lie in (0, 1]")
        try:
            self.loss.weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.camera_model()

    # -- derived objects -------------------------------------------------------

    def camera_model(self) -> CameraModel:
        c = self.camera
        return CameraModel(c.fx, c.fy, c.cx, c.cy, c.height, c.width, forward_looking_pose(c.position),
                           uniform_depth_bins(c.depth_min, c.depth_max, c.depth_bins))

    def feature_grid(self) -> VoxelGridSpec:
        return VoxelGridSpec(self.grid.origin, self.grid.voxel_size, self.grid.extents)

    def label_grid(self) -> VoxelGridSpec:
        return self.feature_grid().scaled(2)

    def scene_spec(self) -> SceneSpec:
        d = self.data
        return SceneSpec(self.label_grid(), self.camera_model(), n_boxes=d.n_boxes, n_poles=d.n_poles,
                         image_channels=self.model.image_channels, image_noise=d.image_noise,
                         teacher_channels=self.model.teacher_channels, teacher_noise=d.teacher_noise,
                         teacher_size=tuple(d.teacher_size), ignore_outside_view=d.ignore_outside_view)

    def dataset_hash(self) -> str:
        blob = f"{self.scene_spec().digest()}|{self.data.num_scenes}|{self.data.dataset_seed}"
        return hashlib.sha256(blob.encode()).hexdigest()

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text(include_paths=False).encode()).hexdigest()

    # -- text round trip -------------------------------------------------------------

    def to_text(self, include_paths: bool = True) -> str:
        lines = []
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                if not include_paths and (name, f.name) in _PATH_KEYS:
                    continue
                lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """``cfg.with_overrides(toggles={"enable_vlgd": False})``."""
        kwargs = {}
        for name in _SECTIONS:
            section = getattr(self, name)
            kwargs[name] = replace(section, **sections.get(name, {}))
        unknown = set(sections) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        return ExperimentConfig(**kwargs)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, kind, default):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is tuple:
        if not raw:
            return ()
        items = [s.strip() for s in raw.split(",")]
        elem = type(default[0]) if default else float
        return tuple(elem(s) for s in items)
    return kind(raw)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    sections = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section [{name}]; valid: {sorted(_SECTIONS)}")
        cls = _SECTIONS[name]
        hints = get_type_hints(cls)
        defaults = cls()
        values = {}
        for key, raw in parser.items(name):
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            try:
                values[key] = _parse_value(raw, hints[key], getattr(defaults, key))
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from exc
        sections[name] = cls(**values)
    return ExperimentConfig(**sections)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return parse_config(Path(path).read_text())
