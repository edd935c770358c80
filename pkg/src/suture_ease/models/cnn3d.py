"""Three-block Conv3D-ReLU-MaxPool3D classifier with a single-logit head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .. import autodiff as ad
from ..errors import DimensionError, GeometryError

KERNEL = 3
PAD = 1
POOL = 2


@dataclass(frozen=True)
class Cnn3dConfig:
    in_channels: int = 3
    block_channels: tuple = (16, 32, 64)
    frames: int = 16
    height: int = 384
    width: int = 384

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if len(self.block_channels) != 3:
            raise GeometryError("the 3D-CNN has exactly three conv-relu-pool blocks")
        if min(self.frames, self.height, self.width) < 8:
            raise GeometryError(
                f"input (T={self.frames}, H={self.height}, W={self.width}) does not survive three halvings"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Cnn3dConfig":
        return cls(**d)


def cnn3d_param_spec(config: Cnn3dConfig) -> dict:
    spec = {}
    c_in = config.in_channels
    for i, c_out in enumerate(config.block_channels):
        spec[f"blocks.{i}.conv.weight"] = ((c_out, c_in, KERNEL, KERNEL, KERNEL), "conv")
        spec[f"blocks.{i}.conv.bias"] = ((c_out,), "zeros")
        c_in = c_out
    spec["head.weight"] = ((c_in, 1), "normal")
    spec["head.bias"] = ((1,), "zeros")
    return spec


def cnn3d_param_count(config: Cnn3dConfig) -> int:
    """sum_i c_i * (c_{i-1} * 27 + 1) over the three blocks, plus c_3 + 1 for the head."""
    total, c_prev = 0, config.in_channels
    for c in config.block_channels:
        total += c * (c_prev * KERNEL ** 3 + 1)
        c_prev = c
    return total + c_prev + 1


def cnn3d_features(config: Cnn3dConfig, params, x):
    """Stacked conv-relu-pool blocks followed by global average pooling -> (B, C3)."""
    x = ad.as_tensor(x)
    expected = (config.in_channels, config.frames, config.height, config.width)
    if x.ndim != 5 or tuple(x.shape[1:]) != expected:
        raise DimensionError(f"block 0: expected input (B, {', '.join(map(str, expected))}), got {x.shape}")
    for i in range(3):
        if min(x.shape[2:]) < POOL:
            raise GeometryError(f"block {i}: extents {x.shape[2:]} too small to pool")
        x = ad.conv3d(x, params[f"blocks.{i}.conv.weight"], params[f"blocks.{i}.conv.bias"], 1, PAD)
        x = ad.relu(x)
        x = ad.maxpool3d(x, POOL, POOL)
    return ad.mean(x, axis=(2, 3, 4))


def cnn3d_forward(config: Cnn3dConfig, params, x):
    """(B, C, T, H, W) clip batch -> (B, 1) logits."""
    feats = cnn3d_features(config, params, x)
    return ad.linear(feats, params["head.weight"], params["head.bias"])
