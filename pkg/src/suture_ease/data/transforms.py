"""Frame sampling, spatial transforms and seeded clip augmentation.

Clips are float32 arrays laid out (C, T, H, W) with pixels in [0, 1].
Spatial functions act on the last two axes, so they accept single frames,
(C, H, W) images or whole clips alike.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ContractError, GeometryError

CLIP_FRAMES = 16
NORM_MEAN = 0.45
NORM_STD = 0.225


def sample_frames(n_frames: int, target: int = CLIP_FRAMES) -> list[int]:
    """Indices floor(i * n_frames / target); short videos repeat frames."""
    if target <= 0:
        raise ContractError(f"target must be positive, got {target}")
    if n_frames < 1:
        raise ContractError(f"n_frames must be >= 1, got {n_frames}")
    return [i * n_frames // target for i in range(target)]


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"output extents must be >= 1, got {(out_h, out_w)}")
    image = np.asarray(image)
    dtype = image.dtype if image.dtype in (np.float32, np.float64) else np.float32
    in_h, in_w = image.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return image.astype(dtype, copy=True)
    y0, y1, wy = _axis_weights(in_h, out_h)
    x0, x1, wx = _axis_weights(in_w, out_w)
    wy = wy.astype(dtype)[:, None]
    wx = wx.astype(dtype)
    rows = image[..., y0, :] * (1 - wy) + image[..., y1, :] * wy
    out = rows[..., x0] * (1 - wx) + rows[..., x1] * wx
    return out.astype(dtype, copy=False)


def flip(image: np.ndarray, axis: str) -> np.ndarray:
    """Mirror along ``"horizontal"`` (reverse columns) or ``"vertical"`` (reverse rows)."""
    if axis == "horizontal":
        return np.ascontiguousarray(image[..., ::-1])
    if axis == "vertical":
        return np.ascontiguousarray(image[..., ::-1, :])
    raise ContractError(f"flip axis must be 'horizontal' or 'vertical', got {axis!r}")


def rotate(image: np.ndarray, angle_degrees: float) -> np.ndarray:
    """Rotate counter-clockwise (as displayed) about the image centre.

    Each output pixel is inverse-mapped and sampled bilinearly; neighbours
    that fall outside the image contribute 0.
    """
    if not math.isfinite(angle_degrees):
        raise ContractError("rotation angle must be finite")
    image = np.asarray(image)
    dtype = image.dtype if image.dtype in (np.float32, np.float64) else np.float32
    h, w = image.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(angle_degrees)
    c, s = math.cos(th), math.sin(th)
    dy, dx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    sx = cx + c * dx - s * dy
    sy = cy + s * dx + c * dy
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = (sx - x0).astype(dtype)
    fy = (sy - y0).astype(dtype)
    padded = np.pad(image, [(0, 0)] * (image.ndim - 2) + [(1, 1), (1, 1)])

    def gather(yy, xx):
        yy = np.clip(yy, -1, h).astype(np.intp) + 1
        xx = np.clip(xx, -1, w).astype(np.intp) + 1
        return padded[..., yy, xx]

    out = (
        gather(y0, x0) * ((1 - fy) * (1 - fx))
        + gather(y0, x0 + 1) * ((1 - fy) * fx)
        + gather(y0 + 1, x0) * (fy * (1 - fx))
        + gather(y0 + 1, x0 + 1) * (fy * fx)
    )
    return out.astype(dtype, copy=False)


@dataclass
class AugmentPolicy:
    """Per-transform probabilities and ranges. All probabilities 0 means identity."""

    hflip_p: float = 0.0
    vflip_p: float = 0.0
    rotate_p: float = 0.0
    rotate_degrees: float = 15.0
    scale_p: float = 0.0
    scale_range: tuple = field(default=(0.9, 1.1))

    @classmethod
    def default(cls) -> "AugmentPolicy":
        return cls(hflip_p=0.5, vflip_p=0.5, rotate_p=0.5, rotate_degrees=15.0, scale_p=0.5, scale_range=(0.9, 1.1))

    @classmethod
    def from_dict(cls, d: "dict | None") -> "AugmentPolicy":
        if not d:
            return cls()
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @property
    def is_identity(self) -> bool:
        return self.hflip_p <= 0 and self.vflip_p <= 0 and self.rotate_p <= 0 and self.scale_p <= 0


def _crop_or_pad(img: np.ndarray, h: int, w: int, rng) -> np.ndarray:
    out = np.zeros(img.shape[:-2] + (h, w), dtype=img.dtype)
    ih, iw = img.shape[-2:]
    if ih >= h:
        sy, dy, ny = int(rng.integers(0, ih - h + 1)), 0, h
    else:
        sy, dy, ny = 0, int(rng.integers(0, h - ih + 1)), ih
    if iw >= w:
        sx, dx, nx = int(rng.integers(0, iw - w + 1)), 0, w
    else:
        sx, dx, nx = 0, int(rng.integers(0, w - iw + 1)), iw
    out[..., dy : dy + ny, dx : dx + nx] = img[..., sy : sy + ny, sx : sx + nx]
    return out


def augment(clip: np.ndarray, policy: AugmentPolicy, rng_seed) -> np.ndarray:
    """Apply one randomly drawn set of transforms identically to every frame.

    ``rng_seed`` is anything ``np.random.default_rng`` accepts; the trainer
    passes ``(seed, epoch, record_index)``. Draws happen in a fixed order so a
    given seed always yields the same clip.
    """
    if policy.is_identity:
        return clip
    rng = np.random.default_rng(rng_seed)
    out = clip
    if policy.hflip_p > 0 and rng.random() < policy.hflip_p:
        out = flip(out, "horizontal")
    if policy.vflip_p > 0 and rng.random() < policy.vflip_p:
        out = flip(out, "vertical")
    if policy.rotate_p > 0 and rng.random() < policy.rotate_p:
        angle = rng.uniform(-policy.rotate_degrees, policy.rotate_degrees)
        out = rotate(out, angle)
    if policy.scale_p > 0 and rng.random() < policy.scale_p:
        h, w = out.shape[-2:]
        scale = rng.uniform(*policy.scale_range)
        nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        out = _crop_or_pad(resize_bilinear(out, nh, nw), h, w, rng)
    return np.ascontiguousarray(out, dtype=clip.dtype)


def prepare_clip(clip: np.ndarray, frames: int = CLIP_FRAMES, size: "tuple[int, int] | None" = None) -> np.ndarray:
    """Sample ``frames`` along T and resize to ``size``; values stay in [0, 1]."""
    clip = np.asarray(clip, dtype=np.float32)
    if clip.ndim != 4:
        raise GeometryError(f"clip must be (C, T, H, W), got {clip.shape}")
    idx = sample_frames(clip.shape[1], frames)
    out = clip[:, idx]
    if size is not None and tuple(out.shape[-2:]) != tuple(size):
        out = resize_bilinear(out, *size)
    return np.ascontiguousarray(out, dtype=np.float32)


def normalize(clip: np.ndarray) -> np.ndarray:
    return ((clip - NORM_MEAN) / NORM_STD).astype(np.float32)
