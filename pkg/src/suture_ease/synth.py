"""Procedural labelled clips with controllable motion motifs.

Three tasks stand in for scored skill domains:

* ``reposition_count`` - a bright bar slides horizontally and reverses
  direction r times (few reversals = class 0, many = class 1);
* ``hold_angle`` - a thin needle segment held at a steep (class 0) or
  shallow (class 1) angle to the horizontal;
* ``smooth_vs_jerky`` - a disc follows a smooth path (class 0) or the same
  path with alternating per-frame jolts (class 1).

Trajectory parameters and pixel noise come from separate seeded streams, so
changing ``noise_std`` never changes the metadata.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data.clipio import write_clip
from .data.manifest import ClipRecord, write_manifest
from .domains import DomainKey, Phase, Skill
from .errors import ContractError, DataError

TASKS = ("reposition_count", "hold_angle", "smooth_vs_jerky")
TASK_DOMAINS = {
    "reposition_count": DomainKey(Phase.NeedleHandling, Skill.NumberOfRepositions),
    "hold_angle": DomainKey(Phase.NeedleHandling, Skill.NeedleHoldAngle),
    "smooth_vs_jerky": DomainKey(Phase.NeedleDriving, Skill.DrivingSmoothness),
}
BACKGROUND = 0.1
FOREGROUND = 0.9
# normalised second-difference energy separating smooth from jerky paths
JERK_THRESHOLD = 0.06


@dataclass(frozen=True)
class Margins:
    """Class-defining parameter bands, indexed by class label."""

    reversals: tuple = ((0, 1), (3, 4))
    angles: tuple = ((70.0, 90.0), (20.0, 40.0))
    jolt: tuple = (0.04, 0.08)

    @classmethod
    def from_dict(cls, d):
        if not d:
            return cls()
        return cls(**{k: tuple(tuple(x) if isinstance(x, list) else x for x in v) for k, v in d.items()})

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))


@dataclass(frozen=True)
class SynthSpec:
    task: str = "hold_angle"
    n_videos: int = 8
    stitches_per_video: int = 4
    resolution: tuple = (32, 32)
    noise_std: float = 0.05
    seed: int = 0
    frames: int = 16
    channels: int = 3
    margins: Margins = field(default_factory=Margins)

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if isinstance(self.margins, dict):
            object.__setattr__(self, "margins", Margins.from_dict(self.margins))
        _check(self.task, self.resolution, self.noise_std)
        if self.n_videos < 1 or self.stitches_per_video < 1:
            raise ContractError("n_videos and stitches_per_video must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["margins"] = self.margins.to_dict()
        return d


def _check(task, resolution, noise_std):
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}; expected one of {TASKS}")
    if min(resolution) < 16:
        raise ContractError(f"resolution must be at least 16x16, got {resolution}")
    if not 0 <= noise_std <= 0.5:
        raise ContractError(f"noise_std must lie in [0, 0.5], got {noise_std}")


# ------------------------------------------------------------------ rasterising


def _box_coverage(centre, half_width, n):
    """Fraction of each pixel [j-0.5, j+0.5] covered by [centre-hw, centre+hw]."""
    j = np.arange(n)
    lo = np.maximum(j - 0.5, centre - half_width)
    hi = np.minimum(j + 0.5, centre + half_width)
    return np.clip(hi - lo, 0.0, 1.0)


def _render_bar(h, w, x, bar_width, bar_height):
    cols = _box_coverage(x, bar_width / 2, w)
    rows = _box_coverage((h - 1) / 2, bar_height / 2, h)
    return np.outer(rows, cols)


def _render_segment(h, w, cx, cy, angle_deg, length, thickness):
    th = math.radians(angle_deg)
    # image y grows downward; a positive angle rises to the right
    ux, uy = math.cos(th), -math.sin(th)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = xx - cx, yy - cy
    t = np.clip(px * ux + py * uy, -length / 2, length / 2)
    d = np.hypot(px - t * ux, py - t * uy)
    return np.clip(thickness / 2 + 0.5 - d, 0.0, 1.0)


def _render_disc(h, w, cx, cy, radius):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.hypot(xx - cx, yy - cy)
    return np.clip(radius + 0.5 - d, 0.0, 1.0)


def _compose(masks, channels, noise_std, rng_noise):
    frames = np.stack(masks)
    img = BACKGROUND + (FOREGROUND - BACKGROUND) * frames
    clip = np.repeat(img[None], channels, axis=0)
    if noise_std > 0:
        clip = clip + rng_noise.normal(0.0, noise_std, clip.shape)
    return np.clip(clip, 0.0, 1.0).astype(np.float32)


# ------------------------------------------------------------------ trajectories


def _reversal_steps(rng, n_steps, r, min_gap=2):
    """r distinct step indices in [min_gap, n_steps - min_gap] at least ``min_gap`` apart."""
    if r == 0:
        return []
    candidates = np.arange(min_gap, n_steps - min_gap + 1)
    for _ in range(1000):
        pick = np.sort(rng.choice(candidates, size=r, replace=False))
        if r == 1 or np.min(np.diff(pick)) >= min_gap:
            return [int(p) for p in pick]
    raise ContractError(f"cannot place {r} reversals in {n_steps} steps")


def count_reversals(velocities) -> int:
    s = np.sign(np.asarray(velocities))
    s = s[s != 0]
    return int(np.sum(s[1:] != s[:-1]))


def _bar_trajectory(rng, frames, w, r):
    n_steps = frames - 1
    steps = set(_reversal_steps(rng, n_steps, r))
    direction = 1.0 if rng.random() < 0.5 else -1.0
    speed = rng.uniform(0.04, 0.07, n_steps) * w
    vel = np.empty(n_steps)
    for k in range(n_steps):
        if k in steps:
            direction = -direction
        vel[k] = direction * speed[k]
    pos = np.concatenate([[0.0], np.cumsum(vel)])
    margin = 0.15 * w
    room = w - 1 - 2 * margin
    span = pos.max() - pos.min()
    if span > room:
        vel *= room / span
        pos = np.concatenate([[0.0], np.cumsum(vel)])
        span = pos.max() - pos.min()
    start = margin + rng.uniform(0, max(room - span, 0.0)) - pos.min()
    return pos + start, vel


def gen_clip(task: str, class_label: int, resolution=(32, 32), noise_std: float = 0.0, seed=0,
             frames: int = 16, channels: int = 3, margins: Margins = Margins()):
    """Render one clip (C, T, H, W) in [0, 1] plus its generating metadata."""
    resolution = tuple(int(v) for v in resolution)
    _check(task, resolution, noise_std)
    if class_label not in (0, 1):
        raise ContractError(f"class_label must be 0 or 1, got {class_label}")
    h, w = resolution
    rng = np.random.default_rng([int(s) for s in np.atleast_1d(seed)] + [0])
    rng_noise = np.random.default_rng([int(s) for s in np.atleast_1d(seed)] + [1])
    meta = {"task": task, "label": class_label}

    if task == "reposition_count":
        lo, hi = margins.reversals[class_label]
        r = int(rng.integers(lo, hi + 1))
        xs, vel = _bar_trajectory(rng, frames, w, r)
        masks = [_render_bar(h, w, x, max(2.0, w / 10), 0.6 * h) for x in xs]
        meta.update(reversals=r, positions=xs.tolist(), velocities=vel.tolist())
    elif task == "hold_angle":
        lo, hi = margins.angles[class_label]
        angle = float(rng.uniform(lo, hi))
        length = 0.6 * min(h, w)
        cx0, cy0 = (w - 1) / 2 + rng.uniform(-0.1, 0.1) * w, (h - 1) / 2 + rng.uniform(-0.1, 0.1) * h
        drift = rng.uniform(-0.01, 0.01, 2) * np.array([w, h])
        centres = [(cx0 + drift[0] * t, cy0 + drift[1] * t) for t in range(frames)]
        masks = [_render_segment(h, w, cx, cy, angle, length, max(1.5, w / 20)) for cx, cy in centres]
        meta.update(angle=angle, centres=[list(c) for c in centres])
    else:
        t = np.arange(frames)
        amp = rng.uniform(0.1, 0.25, 2) * np.array([w, h])
        period = rng.uniform(16, 32, 2)
        phase = rng.uniform(0, 2 * np.pi, 2)
        path = np.stack([(w - 1) / 2 + amp[0] * np.sin(2 * np.pi * t / period[0] + phase[0]),
                         (h - 1) / 2 + amp[1] * np.sin(2 * np.pi * t / period[1] + phase[1])], axis=1)
        if class_label == 1:
            sign = np.where(t % 2 == 0, 1.0, -1.0) * (1.0 if rng.random() < 0.5 else -1.0)
            mag = rng.uniform(*margins.jolt, frames) * w
            axis = rng.uniform(0, 2 * np.pi)
            jolt = (sign * mag)[:, None] * np.array([math.cos(axis), math.sin(axis)])
            path = path + jolt
        masks = [_render_disc(h, w, x, y, max(2.0, w / 12)) for x, y in path]
        meta.update(path=path.tolist(), jerk_energy=jerk_energy(path, w))
    return _compose(masks, channels, noise_std, rng_noise), meta


def jerk_energy(path, width) -> float:
    """Sum of squared second differences of a (T, 2) path, in units of width^2."""
    path = np.asarray(path, dtype=np.float64)
    d2 = path[2:] - 2 * path[1:-1] + path[:-2]
    return float(np.sum(d2 ** 2) / width ** 2)


def label_from_metadata(meta: dict) -> int:
    """Ground truth recovered from generating parameters alone."""
    task = meta["task"]
    if task == "reposition_count":
        return int(count_reversals(meta["velocities"]) >= 2)
    if task == "hold_angle":
        return int(meta["angle"] < 55.0)
    return int(meta["jerk_energy"] > JERK_THRESHOLD)


# ------------------------------------------------------------------ pixel heuristics


def _foreground(clip):
    frames = clip.mean(axis=0)
    return np.clip(frames - np.median(frames, axis=(1, 2), keepdims=True), 0, None)


def _centroids(fg):
    t, h, w = fg.shape
    total = fg.sum(axis=(1, 2)) + 1e-12
    xs = (fg.sum(axis=1) * np.arange(w)).sum(axis=1) / total
    ys = (fg.sum(axis=2) * np.arange(h)).sum(axis=1) / total
    return np.stack([xs, ys], axis=1)


def heuristic_score(task: str, clip: np.ndarray) -> float:
    """Hand-coded pixel statistic that ranks class 1 above class 0."""
    fg = _foreground(np.asarray(clip, dtype=np.float64))
    if task == "reposition_count":
        xs = _centroids(fg)[:, 0]
        return float(count_reversals(np.diff(xs)))
    if task == "hold_angle":
        img = fg.mean(axis=0)
        h, w = img.shape
        yy, xx = np.mgrid[0:h, 0:w]
        m = img.sum()
        cx, cy = (img * xx).sum() / m, (img * yy).sum() / m
        mu20 = (img * (xx - cx) ** 2).sum()
        mu02 = (img * (yy - cy) ** 2).sum()
        mu11 = (img * (xx - cx) * (yy - cy)).sum()
        theta = 0.5 * math.degrees(math.atan2(-2 * mu11, mu20 - mu02))
        return -abs(theta)
    if task == "smooth_vs_jerky":
        return jerk_energy(_centroids(fg), clip.shape[-1])
    raise ContractError(f"unknown task {task!r}")


# ------------------------------------------------------------------ datasets


def record_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def gen_dataset(spec: SynthSpec, out_dir: "str | os.PathLike") -> Path:
    """Write clips, ``manifest.jsonl`` and ``metadata.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    clip_dir = out_dir / "clips"
    try:
        clip_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {clip_dir}: {exc}", path=str(clip_dir)) from exc
    n = spec.n_videos * spec.stitches_per_video
    labels = np.random.default_rng([spec.seed, 2**31 - 1]).permutation(np.arange(n) % 2)
    domain = TASK_DOMAINS[spec.task]
    records, metas = [], []
    for i in range(n):
        v, s = divmod(i, spec.stitches_per_video)
        clip, meta = gen_clip(spec.task, int(labels[i]), spec.resolution, spec.noise_std,
                              record_seed(spec.seed, i), spec.frames, spec.channels, spec.margins)
        path = clip_dir / f"v{v:03d}_s{s:02d}.clip"
        try:
            write_clip(path, clip)
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}", path=str(path)) from exc
        records.append(ClipRecord(f"v{v:03d}", s, domain, int(labels[i]), path))
        metas.append({"video_id": f"v{v:03d}", "stitch_idx": s, **meta})
    (out_dir / "metadata.jsonl").write_text("".join(json.dumps(m) + "\n" for m in metas))
    (out_dir / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    return write_manifest(records, out_dir / "manifest.jsonl")
