"""Pipeline configuration: one JSON document, every key optional.

Nested sections mirror the library dataclasses::

    {
      "data_root": "data", "weights": "weights.bin", "bank": "bank", "seed": 0,
      "image_mode": "backbone",            # or "raw"
      "virtual_resolution": [16, 8, 22], "query_resolution": [6, 6, 6],
      "margin": 0.8, "spconv_layers": 2, "nms_iou": 0.1, "score_threshold": 0.5,
      "augment_global": false,
      "virtual_voxel": {"voxel_size": [...], "range": [[..], [..], [..]], ...},
      "lidar_voxel": {...}, "query": {"ranges": [...], "K": [...]},
      "resize": {"u_theta": 0.08, "u_xyzwlh": [...]}, "paste": {...},
      "global_aug": {...}, "loss": {...}, "eval": {...}
    }
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augmentation import GlobalAugConfig, PasteConfig
from .errors import ValidationError
from .evaluation import EvalConfig
from .heads_losses import LossWeights
from .sparse_voxel import QueryConfig, VoxelizationConfig
from .virtual_points import ResizeConfig

DATA_ROOT_ENV = "VPFUSE_DATA_ROOT"


def _default_virtual_voxel() -> VoxelizationConfig:
    return VoxelizationConfig(voxel_size=(0.2, 0.2, 0.1), max_points_per_voxel=5, max_voxels=200000)


def _default_lidar_voxel() -> VoxelizationConfig:
    return VoxelizationConfig(voxel_size=(0.1, 0.1, 0.2), max_voxels=200000)


@dataclass(frozen=True)
class PipelineConfig:
    data_root: str = "data"
    weights: str | None = None
    bank: str | None = None
    seed: int = 0
    image_mode: str = "backbone"
    virtual_resolution: tuple = (16, 8, 22)
    query_resolution: tuple = (6, 6, 6)
    margin: float = 0.8
    spconv_layers: int = 2
    nms_iou: float = 0.1
    score_threshold: float = 0.5
    augment_global: bool = False
    virtual_voxel: VoxelizationConfig = field(default_factory=_default_virtual_voxel)
    lidar_voxel: VoxelizationConfig = field(default_factory=_default_lidar_voxel)
    query: QueryConfig = field(default_factory=QueryConfig)
    resize: ResizeConfig = field(default_factory=ResizeConfig)
    paste: PasteConfig = field(default_factory=PasteConfig)
    global_aug: GlobalAugConfig = field(default_factory=GlobalAugConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.image_mode not in ("backbone", "raw"):
            raise ValidationError(f"image_mode must be 'backbone' or 'raw', got {self.image_mode!r}")
        for name in ("virtual_resolution", "query_resolution"):
            v = tuple(int(x) for x in getattr(self, name))
            if len(v) != 3 or min(v) < 1:
                raise ValidationError(f"{name} needs three positive integers")
            object.__setattr__(self, name, v)
        if self.margin < 0 or not 0.0 <= self.nms_iou <= 1.0 or not 0.0 <= self.score_threshold <= 1.0:
            raise ValidationError("margin, nms_iou or score_threshold out of range")
        if not 1 <= int(self.spconv_layers) <= 6:
            raise ValidationError("spconv_layers must be between 1 and 6")
        if self.weights is not None and not Path(self.weights).is_file():
            raise ValidationError(f"weights file {self.weights} does not exist")

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


_SECTIONS = {
    "virtual_voxel": VoxelizationConfig,
    "lidar_voxel": VoxelizationConfig,
    "query": QueryConfig,
    "resize": ResizeConfig,
    "paste": PasteConfig,
    "global_aug": GlobalAugConfig,
    "loss": LossWeights,
    "eval": EvalConfig,
}


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ValidationError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**{k: _tuplify(v) for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"section {name!r}: {exc}") from None


def config_from_dict(data: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    kw = {}
    for k, v in data.items():
        kw[k] = _section(_SECTIONS[k], v, k) if k in _SECTIONS else _tuplify(v)
    try:
        return dataclasses.replace(base or PipelineConfig(), **kw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from None


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a JSON config, then the data-root environment override, then flag overrides."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
    if os.environ.get(DATA_ROOT_ENV):
        data["data_root"] = os.environ[DATA_ROOT_ENV]
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(data)
