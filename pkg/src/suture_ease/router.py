"""Domain-to-model routing.

Each of the seven scored domains owns one trained model. A route names the
architecture family, the clip geometry it expects and the checkpoint file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import sigmoid
from .data.clipio import read_clip
from .data.transforms import CLIP_FRAMES, normalize, prepare_clip
from .domains import ALL_DOMAINS, DomainKey, Phase, Skill, canonical_names
from .errors import CompatibilityError, ConfigError, DataError, EaseError, RoutingError
from .models import CNN3D, FAMILIES, MVIT, ModelState, load_checkpoint

FULL_RESOLUTION = {MVIT: (224, 224), CNN3D: (384, 384)}
_FAMILY = {
    (Phase.NeedleHandling, Skill.NumberOfRepositions): MVIT,
    (Phase.NeedleHandling, Skill.NeedleHoldDepth): CNN3D,
    (Phase.NeedleHandling, Skill.NeedleHoldRatio): CNN3D,
    (Phase.NeedleHandling, Skill.NeedleHoldAngle): CNN3D,
    (Phase.NeedleDriving, Skill.DrivingSmoothness): MVIT,
    (Phase.NeedleDriving, Skill.WristRotation): MVIT,
    (Phase.NeedleWithdrawal, Skill.WristRotation): MVIT,
}
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class RouteEntry:
    domain: DomainKey
    family: str
    resolution: tuple
    frames: int = CLIP_FRAMES
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))

    @property
    def overridden(self) -> bool:
        """True when the geometry differs from the published input size."""
        return self.resolution != FULL_RESOLUTION[self.family]

    def to_dict(self) -> dict:
        d = {
            "domain": self.domain.canonical,
            "family": self.family,
            "resolution": list(self.resolution),
            "frames": self.frames,
            "checkpoint": self.checkpoint,
        }
        if self.overridden:
            d["full_resolution"] = list(FULL_RESOLUTION[self.family])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RouteEntry":
        try:
            return cls(DomainKey.parse(d["domain"]), d["family"], tuple(d["resolution"]),
                       int(d.get("frames", CLIP_FRAMES)), d.get("checkpoint"))
        except KeyError as exc:
            raise ConfigError(f"route entry missing field {exc}") from exc


def default_routes() -> list[RouteEntry]:
    """MViTv2 at 224x224 for four domains, the 3D-CNN at 384x384 for the three hold domains."""
    return [RouteEntry(d, _FAMILY[(d.phase, d.skill)], FULL_RESOLUTION[_FAMILY[(d.phase, d.skill)]])
            for d in ALL_DOMAINS]


def validate_routes(routes: Sequence[RouteEntry]) -> None:
    seen = set()
    for r in routes:
        if r.domain in seen:
            raise RoutingError(f"duplicate route for {r.domain.canonical}")
        seen.add(r.domain)


def resolve(routes: Sequence[RouteEntry], domain) -> RouteEntry:
    key = DomainKey.parse(domain) if not isinstance(domain, DomainKey) else domain
    for r in routes:
        if r.domain == key:
            return r
    raise RoutingError(f"no route for {key.canonical}", valid=canonical_names())


def with_overrides(routes: Sequence[RouteEntry], resolution=None, checkpoints: "dict | None" = None):
    out = []
    for r in routes:
        if resolution is not None:
            r = replace(r, resolution=tuple(resolution))
        if checkpoints and r.domain in checkpoints:
            r = replace(r, checkpoint=str(checkpoints[r.domain]))
        out.append(r)
    return out


def load_routes(path: "str | os.PathLike") -> list[RouteEntry]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read routes file {path}: {exc}", path=str(path)) from exc
    if not isinstance(raw, list):
        raise ConfigError("routes file must hold a JSON array", path=str(path))
    routes = [RouteEntry.from_dict(d) for d in raw]
    validate_routes(routes)
    base = path.parent
    return [replace(r, checkpoint=str(base / r.checkpoint)) if r.checkpoint and not Path(r.checkpoint).is_absolute()
            else r for r in routes]


def save_routes(routes: Sequence[RouteEntry], path: "str | os.PathLike") -> Path:
    validate_routes(routes)
    path = Path(path)
    path.write_text(json.dumps([r.to_dict() for r in routes], indent=2) + "\n")
    return path


def preprocess(clip: np.ndarray, entry: RouteEntry) -> np.ndarray:
    """Sample/resize to the route geometry and standardise -> (C, T, H, W)."""
    return normalize(prepare_clip(clip, entry.frames, entry.resolution))


def check_model(model: ModelState, entry: RouteEntry) -> None:
    cfg = model.config
    if model.arch != entry.family:
        raise CompatibilityError(f"{entry.domain.canonical} routes to {entry.family} but checkpoint is {model.arch}")
    if (cfg.frames, cfg.height, cfg.width) != (entry.frames,) + entry.resolution:
        raise CompatibilityError(
            f"checkpoint geometry {(cfg.frames, cfg.height, cfg.width)} does not match route "
            f"{(entry.frames,) + entry.resolution}"
        )


def load_route_model(entry: RouteEntry) -> ModelState:
    if not entry.checkpoint:
        raise DataError(f"route {entry.domain.canonical} has no checkpoint")
    if not Path(entry.checkpoint).exists():
        raise DataError(f"checkpoint not found: {entry.checkpoint}", path=entry.checkpoint)
    model = load_checkpoint(entry.checkpoint, expected_arch=entry.family)
    check_model(model, entry)
    return model


def score_batch(model: ModelState, batch: np.ndarray) -> np.ndarray:
    logits = model(batch).data.reshape(-1)
    return sigmoid(logits)


@dataclass(frozen=True)
class Prediction:
    domain: str
    score: float
    decision: int


def predict(routes: Sequence[RouteEntry], domain, clip, model: Optional[ModelState] = None,
            threshold: float = DEFAULT_THRESHOLD) -> Prediction:
    """Score one clip (array or clip-file path) with the model routed for ``domain``."""
    entry = resolve(routes, domain)
    if model is None:
        model = load_route_model(entry)
    else:
        check_model(model, entry)
    if not isinstance(clip, np.ndarray):
        clip = read_clip(clip)
    x = preprocess(clip, entry)[None]
    expected = (1, model.config.in_channels, entry.frames) + entry.resolution
    if x.shape != expected:
        raise EaseError(f"preprocessed clip has shape {x.shape}, model expects {expected}")
    score = float(score_batch(model, x)[0])
    return Prediction(entry.domain.canonical, score, int(score >= threshold))
