"""Parameter layout, seeded initialization and the MFW1 weight file."""
from __future__ import annotations

import struct
import zlib
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .config import ArchConfig, UNetConfig

MFW_MAGIC = b"MFW1"


def _linear(shapes, path, n_in, n_out, bias=True):
    shapes[f"{path}/w"] = (n_in, n_out)
    if bias:
        shapes[f"{path}/b"] = (n_out,)


def _norm(shapes, path, c):
    shapes[f"{path}/g"] = (c,)
    shapes[f"{path}/b"] = (c,)


def _resblock(shapes, path, c_in, c_out):
    _norm(shapes, f"{path}/norm1", c_in)
    shapes[f"{path}/conv1/w"] = (27, c_in, c_out)
    shapes[f"{path}/conv1/b"] = (c_out,)
    _norm(shapes, f"{path}/norm2", c_out)
    shapes[f"{path}/conv2/w"] = (27, c_out, c_out)
    shapes[f"{path}/conv2/b"] = (c_out,)
    if c_in != c_out:
        _linear(shapes, f"{path}/skip", c_in, c_out, bias=False)


def _attention(shapes, path, c, pixel_width, width):
    _norm(shapes, f"{path}/norm", c)
    _linear(shapes, f"{path}/q", c, width, bias=False)
    _linear(shapes, f"{path}/k_voxel", c, width, bias=False)
    _linear(shapes, f"{path}/k_pixel", pixel_width, width, bias=False)
    _linear(shapes, f"{path}/v_voxel", c, c, bias=False)
    _linear(shapes, f"{path}/v_pixel", pixel_width, c, bias=False)
    _linear(shapes, f"{path}/out", c, c)


def _unet(shapes, prefix, u: UNetConfig, pixel_width, attn_width):
    ch, n = u.channels, u.levels
    shapes[f"{prefix}/token"] = (ch[0],)
    for l in range(n):
        _resblock(shapes, f"{prefix}/down{l}/res", ch[l], ch[l])
        _attention(shapes, f"{prefix}/down{l}/attn", ch[l], pixel_width, attn_width)
        if l < n - 1:
            k = u.down_factors[l] ** 3
            shapes[f"{prefix}/down{l}/down/w"] = (k, ch[l], ch[l + 1])
            shapes[f"{prefix}/down{l}/down/b"] = (ch[l + 1],)
    w = u.transformer_width
    if u.transformer_layers and ch[-1] != w:
        _linear(shapes, f"{prefix}/bottleneck/in", ch[-1], w)
        _linear(shapes, f"{prefix}/bottleneck/out", w, ch[-1])
    for t in range(u.transformer_layers):
        p = f"{prefix}/bottleneck/layer{t}"
        _norm(shapes, f"{p}/norm1", w)
        _linear(shapes, f"{p}/qkv", w, 3 * w)
        _linear(shapes, f"{p}/proj", w, w)
        _norm(shapes, f"{p}/norm2", w)
        _linear(shapes, f"{p}/mlp1", w, u.mlp_ratio * w)
        _linear(shapes, f"{p}/mlp2", u.mlp_ratio * w, w)
    for l in range(n - 2, -1, -1):
        k = u.down_factors[l] ** 3
        shapes[f"{prefix}/up{l}/up/w"] = (k, ch[l + 1], ch[l])
        shapes[f"{prefix}/up{l}/up/b"] = (ch[l],)
        _resblock(shapes, f"{prefix}/up{l}/res", 2 * ch[l], ch[l])
    _norm(shapes, f"{prefix}/out_norm", ch[0])
    _linear(shapes, f"{prefix}/out", ch[0], u.out_channels)


def parameter_shapes(config: ArchConfig) -> dict:
    """Every parameter path and its shape, without allocating anything."""
    shapes: dict = {}
    for stream in ("rgb", "normal"):
        s = config.encoder_stride
        shapes[f"encoder/{stream}/patch/w"] = (3 * s * s, config.encoder_hidden)
        shapes[f"encoder/{stream}/patch/b"] = (config.encoder_hidden,)
        shapes[f"encoder/{stream}/conv/w"] = (9, config.encoder_hidden, config.image_channels)
        shapes[f"encoder/{stream}/conv/b"] = (config.image_channels,)
    pw = config.pixel_feature_width
    _unet(shapes, "voxel", config.voxel, pw, config.attention_width)
    _unet(shapes, "sparse", config.sparse, pw, config.attention_width)
    c = config.sparse.out_channels
    for head, k in (("sdf", 1), ("color", 3), ("normal", 3)):
        _linear(shapes, f"heads/{head}/0", c, config.head_hidden)
        _linear(shapes, f"heads/{head}/1", config.head_hidden, k)
    return shapes


def parameter_count(config: ArchConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


def _init(path: str, shape: tuple, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(path.encode())])
    leaf = path.rsplit("/", 1)[-1]
    if leaf == "g":
        return np.ones(shape, np.float32)
    if leaf == "b":
        if "/norm" in path or path.endswith("_norm/b"):
            return np.zeros(shape, np.float32)
        return (0.1 * rng.standard_normal(shape)).astype(np.float32)
    if leaf == "token":
        return rng.standard_normal(shape).astype(np.float32)
    fan_in = int(np.prod(shape[:-1]))
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)


class WeightStore(Mapping):
    """Immutable mapping from layer path to a float32 parameter array."""

    def __init__(self, params: Mapping, config_hash: bytes):
        self._params = {}
        for k, v in params.items():
            arr = np.array(v, dtype=np.float32)
            arr.setflags(write=False)
            self._params[k] = arr
        self.config_hash = bytes(config_hash)

    @classmethod
    def initialize(cls, config: ArchConfig, seed: int = 0) -> "WeightStore":
        """Seeded init; each tensor draws from its own stream keyed by its path."""
        params = {p: _init(p, s, seed) for p, s in parameter_shapes(config).items()}
        return cls(params, config.config_hash())

    def __getitem__(self, key):
        try:
            return self._params[key]
        except KeyError:
            raise KeyError(f"missing weight {key!r}") from None

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def check(self, config: ArchConfig) -> None:
        """Raise unless the store holds exactly the layout ``config`` expects."""
        expected = parameter_shapes(config)
        missing = sorted(set(expected) - set(self._params))
        extra = sorted(set(self._params) - set(expected))
        if missing or extra:
            raise ValueError(f"weights do not match config: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, s in expected.items():
            if self._params[k].shape != tuple(s):
                raise ValueError(f"weight {k!r} has shape {self._params[k].shape}, expected {tuple(s)}")

    def to_bytes(self) -> bytes:
        out = [MFW_MAGIC, struct.pack("<I", len(self.config_hash)), self.config_hash,
               struct.pack("<I", len(self._params))]
        for k, v in self._params.items():
            name = k.encode()
            out.append(struct.pack("<I", len(name)) + name)
            out.append(struct.pack("<I", v.ndim) + struct.pack(f"<{v.ndim}I", *v.shape))
            out.append(v.astype("<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightStore":
        if data[:4] != MFW_MAGIC:
            raise ValueError("not an MFW1 weight file")
        pos = 4
        (n,) = struct.unpack_from("<I", data, pos); pos += 4
        h = data[pos:pos + n]; pos += n
        (count,) = struct.unpack_from("<I", data, pos); pos += 4
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, pos); pos += 4
            name = data[pos:pos + ln].decode(); pos += ln
            (nd,) = struct.unpack_from("<I", data, pos); pos += 4
            shape = struct.unpack_from(f"<{nd}I", data, pos); pos += 4 * nd
            size = int(np.prod(shape))
            params[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape)
            pos += 4 * size
        if pos != len(data):
            raise ValueError("trailing bytes in MFW1 weight file")
        return cls(params, h)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, config: ArchConfig | None = None) -> "WeightStore":
        store = cls.from_bytes(Path(path).read_bytes())
        if config is not None:
            if store.config_hash != config.config_hash():
                raise ValueError(f"{path}: weights were saved for a different configuration")
            store.check(config)
        return store
