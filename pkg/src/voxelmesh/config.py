"""Pipeline configuration loaded from TOML or JSON."""
from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .backbone.config import PRESETS
from .enhance import EnhanceParams
from .render.loss import LossWeights

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class PipelineConfig:
    """Everything ``reconstruct`` needs besides the input views.

    ``coarse_resolution`` and ``sparse_factor`` default to the preset's own
    values when left as None.
    """

    preset: str = "toy"
    coarse_resolution: int | None = None
    sparse_factor: int | None = None
    sdf_resolution: int = 32
    half_extent: float = 1.0
    occupancy_threshold: float = 0.5
    occupancy_band: float | None = None
    skip_enhance: bool = False
    seed: int = 0
    weights: str | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    enhance: EnhanceParams = field(default_factory=EnhanceParams)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**_known(LossWeights, self.loss_weights, "loss_weights")))
        if isinstance(self.enhance, dict):
            object.__setattr__(self, "enhance", EnhanceParams(**_known(EnhanceParams, self.enhance, "enhance")))
        if not 0.0 < self.occupancy_threshold < 1.0:
            raise ValueError("occupancy_threshold must lie in (0, 1)")
        if self.sdf_resolution < 2 or self.half_extent <= 0:
            raise ValueError("sdf_resolution must be >= 2 and half_extent positive")

    @property
    def arch(self):
        return PRESETS[self.preset]

    @property
    def resolved_coarse(self) -> int:
        return self.coarse_resolution or self.arch.voxel.resolutions[0]

    @property
    def resolved_factor(self) -> int:
        return self.sparse_factor or self.arch.sparse_factor

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        """Copy with every non-None keyword applied."""
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


def _known(cls, d: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    return dict(d)


def config_from_dict(d: dict) -> PipelineConfig:
    return PipelineConfig(**_known(PipelineConfig, d, "pipeline"))


def load_config(path) -> PipelineConfig:
    """Read a ``.toml`` or ``.json`` config; unknown keys are errors."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        data = tomllib.loads(text)
    return config_from_dict(data)
