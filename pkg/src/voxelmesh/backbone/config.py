"""Architecture configuration and the named presets."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class UNetConfig:
    """One UNet: per-level resolution and width, plus the bottleneck transformer."""

    resolutions: tuple
    channels: tuple
    transformer_layers: int
    transformer_width: int
    out_channels: int
    transformer_heads: int = 1
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.resolutions) != len(self.channels) or not self.resolutions:
            raise ValueError("resolutions and channels need one entry per level")
        for a, b in zip(self.resolutions, self.resolutions[1:]):
            if a not in (b, 2 * b):
                raise ValueError(f"level resolutions must halve or repeat, got {a} -> {b}")
        if self.transformer_layers < 0 or self.transformer_width < 1:
            raise ValueError("invalid transformer configuration")
        if self.transformer_width % self.transformer_heads:
            raise ValueError("transformer width must be divisible by the head count")

    @property
    def levels(self) -> int:
        return len(self.resolutions)

    @property
    def down_factors(self) -> tuple:
        return tuple(a // b for a, b in zip(self.resolutions, self.resolutions[1:]))


@dataclass(frozen=True)
class ArchConfig:
    name: str
    voxel: UNetConfig
    sparse: UNetConfig
    image_channels: int          # feature width of each 2D stream (RGB, normal)
    encoder_hidden: int
    encoder_stride: int
    attention_width: int
    attention_heads: int = 1
    head_hidden: int = 32

    def __post_init__(self):
        for name in ("voxel", "sparse"):
            val = getattr(self, name)
            if isinstance(val, dict):
                object.__setattr__(self, name, UNetConfig(**_checked(UNetConfig, val)))
        if self.attention_width % self.attention_heads:
            raise ValueError("attention width must be divisible by the head count")
        for c in self.voxel.channels + self.sparse.channels:
            if c % self.attention_heads:
                raise ValueError("every level width must be divisible by the attention head count")

    @property
    def pixel_feature_width(self) -> int:
        """Width of a projected pixel feature: RGB feature, normal feature, RGB, normal."""
        return 2 * self.image_channels + 6

    @property
    def sparse_factor(self) -> int:
        f, r = divmod(self.sparse.resolutions[0], self.voxel.resolutions[0])
        if r or f < 2:
            raise ValueError("sparse resolution must be an integer multiple (>= 2) of the coarse one")
        return f

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**_checked(cls, d))

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


def _checked(cls, d: dict) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return dict(d)


PAPER = ArchConfig(
    name="paper",
    voxel=UNetConfig(
        resolutions=(64, 32, 16, 16), channels=(64, 128, 256, 512),
        transformer_layers=6, transformer_width=512, out_channels=1,
    ),
    sparse=UNetConfig(
        resolutions=(256, 128, 64, 32, 16, 16), channels=(16, 32, 64, 128, 512, 2048),
        transformer_layers=16, transformer_width=1024, out_channels=32,
    ),
    # The 2D encoder is a fixture stand-in; its widths are not taken from anywhere.
    image_channels=64,
    encoder_hidden=64,
    encoder_stride=8,
    attention_width=64,
    head_hidden=64,
)

TOY = ArchConfig(
    name="toy",
    voxel=UNetConfig(
        resolutions=(16, 8), channels=(8, 16),
        transformer_layers=2, transformer_width=16, out_channels=1,
    ),
    sparse=UNetConfig(
        resolutions=(32, 16), channels=(8, 16),
        transformer_layers=1, transformer_width=16, out_channels=8,
    ),
    image_channels=8,
    encoder_hidden=8,
    encoder_stride=4,
    attention_width=8,
    head_hidden=16,
)

PRESETS = {"paper": PAPER, "toy": TOY}


def preset(name: str) -> ArchConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
