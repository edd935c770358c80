"""BCE loss, Adam and the seeded epoch loop for one routed domain."""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Tape, Tensor, apply_op, sigmoid
from .data import AugmentPolicy, augment, filter_domain, normalize, prepare_clip, read_clip, read_manifest, split_videos
from .domains import DomainKey
from .errors import ConfigError, ContractError, DataError, DivergenceError
from .evaluation import roc_auc, score_records
from .models import CNN3D, MVIT, ModelState, build_model, config_from_dict, save_checkpoint
from .router import default_routes, resolve

CHECKPOINT_NAME = "model.ckpt"
HISTORY_NAME = "history.jsonl"


# ------------------------------------------------------------------ loss


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits, fused for stability.

    Per element: max(z, 0) - z*y + log1p(exp(-|z|)); gradient (sigmoid(z) - y)/n.
    """
    z_t = logits if isinstance(logits, Tensor) else Tensor(logits)
    z = z_t.data
    y = np.asarray(labels, dtype=z.dtype).reshape(z.shape)
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be 0 or 1")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = np.asarray(per.sum() / n, dtype=z.dtype)

    def vjp(g):
        return ((sigmoid(z) - y) * (g / n)).astype(z.dtype, copy=False),

    return apply_op("bce_with_logits", (z_t,), out, vjp)


# ------------------------------------------------------------------ optimiser


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(0, {k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper, lr: Optional[float] = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``; L2 decay is added to the gradient."""
    lr = hyper.lr if lr is None else lr
    if not state.m:
        state.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        state.v = {k: np.zeros_like(p.data) for k, p in params.items()}
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m.get(name), state.v.get(name)
        if g.shape != p.shape or m is None or m.shape != p.shape or v.shape != p.shape:
            raise ContractError(f"Adam buffers for {name} do not match parameter shape {p.shape}")
        if hyper.weight_decay:
            g = g + hyper.weight_decay * p.data
        m *= hyper.beta1
        m += (1 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1 - hyper.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        p.data -= (lr * update).astype(p.dtype, copy=False)
    return state


def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


# ------------------------------------------------------------------ single steps


def train_step(model: ModelState, x: np.ndarray, y: np.ndarray, state: AdamState, hyper: AdamHyper,
               lr: Optional[float] = None) -> float:
    model.zero_grad()
    with Tape() as tape:
        loss = bce_with_logits(model(x), y)
    tape.backward(loss)
    value = float(loss.data)
    if not math.isfinite(value):
        return value
    adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state, hyper, lr)
    return value


def fit_steps(model: ModelState, clips: np.ndarray, labels: np.ndarray, steps: int, batch_size: int = 8,
              hyper: AdamHyper = AdamHyper(), seed: int = 0) -> list[float]:
    """Plain minibatch loop over in-memory normalised clips; returns per-step losses."""
    n = len(clips)
    state = AdamState()
    losses = []
    order, pos, epoch = np.arange(n), n, 0
    for step in range(steps):
        if pos + batch_size > n:
            order = np.random.default_rng([seed, epoch]).permutation(n)
            pos, epoch = 0, epoch + 1
        idx = order[pos:pos + batch_size]
        pos += batch_size
        loss = train_step(model, clips[idx], labels[idx], state, hyper)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        losses.append(loss)
    return losses


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class TrainConfig:
    domain: DomainKey
    manifest: str
    output: str
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    augmentation: AugmentPolicy = field(default_factory=AugmentPolicy.default)
    family: Optional[str] = None
    resolution: Optional[tuple] = None
    model: dict = field(default_factory=dict)
    schedule: str = "constant"
    test_fraction: float = 0.2
    threads: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.domain, str):
            object.__setattr__(self, "domain", DomainKey.parse(self.domain))
        if isinstance(self.augmentation, dict):
            object.__setattr__(self, "augmentation", AugmentPolicy.from_dict(self.augmentation))
        if self.resolution is not None:
            object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def hyper(self) -> AdamHyper:
        return AdamHyper(self.learning_rate, self.beta1, self.beta2, self.eps, self.weight_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = self.domain.canonical
        d["augmentation"] = self.augmentation.to_dict()
        d["resolution"] = list(self.resolution) if self.resolution else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training fields {sorted(unknown)}")
        return cls(**d)


def model_for(config: TrainConfig) -> ModelState:
    """Fresh model for the routed family at the (possibly overridden) geometry."""
    entry = resolve(default_routes(), config.domain)
    family = config.family or entry.family
    if family not in (CNN3D, MVIT):
        raise ConfigError(f"unknown family {family!r}")
    h, w = config.resolution or entry.resolution
    arch_cfg = config_from_dict(family, {**config.model, "frames": entry.frames, "height": h, "width": w})
    return build_model(family, arch_cfg, seed=config.seed)


# ------------------------------------------------------------------ loop


class _ClipSource:
    """Prepared clips at model geometry; cached in memory up to a byte budget."""

    def __init__(self, records, frames, size, budget=1 << 30):
        self.records = records
        self.frames, self.size = frames, size
        per = 4 * 3 * frames * size[0] * size[1]
        self.cache = {} if per * len(records) <= budget else None

    def get(self, i):
        if self.cache is not None and i in self.cache:
            return self.cache[i]
        rec = self.records[i]
        try:
            clip = prepare_clip(read_clip(rec.path), self.frames, self.size)
        except DataError as exc:
            exc.context.setdefault("record", f"{rec.video_id}/{rec.stitch_idx}")
            raise
        if self.cache is not None:
            self.cache[i] = clip
        return clip


@dataclass
class TrainResult:
    model: ModelState
    history: list
    step_losses: list
    best_epoch: int
    best_auc: float
    checkpoint: Optional[Path]


def _split(config: TrainConfig):
    records = read_manifest(config.manifest)
    if all(r.split == "unassigned" for r in records):
        records = split_videos(records, config.test_fraction, config.seed)
    train = filter_domain(records, config.domain, "train")
    test = filter_domain(records, config.domain, "test")
    if not train or not test:
        raise DataError(f"{config.domain.canonical} needs records in both splits",
                        n_train=len(train), n_test=len(test))
    if len({r.label for r in test}) < 2:
        raise DataError("test split holds a single class; AUC is undefined", n_test=len(test))
    return train, test


def train(config: TrainConfig, on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Seeded training with per-epoch test AUC; keeps the best-AUC checkpoint."""
    train_recs, test_recs = _split(config)
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=config.threads):
        return _train(config, train_recs, test_recs, out, on_epoch)


def _train(config, train_recs, test_recs, out: Path, on_epoch) -> TrainResult:
    model = model_for(config)
    cfg = model.config
    geometry = (cfg.height, cfg.width)
    source = _ClipSource(train_recs, cfg.frames, geometry)
    labels = np.array([r.label for r in train_recs], dtype=np.float32)
    hyper = config.hyper
    state = AdamState()
    n = len(train_recs)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    history, step_losses = [], []
    best_auc, best_epoch, ckpt_path = -1.0, -1, out / CHECKPOINT_NAME
    history_path = out / HISTORY_NAME
    history_path.write_text("")

    def load_batch(epoch, idx):
        clips = []
        for i in idx:
            clip = augment(source.get(int(i)), config.augmentation, (config.seed, epoch, int(i)))
            clips.append(normalize(clip))
        return np.stack(clips), labels[idx]

    workers = max(1, min(config.threads or os.cpu_count() or 1, 4))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            batches = [order[s:s + config.batch_size] for s in range(0, n, config.batch_size)]
            # futures are consumed in submission order, so prefetching never reorders batches
            futures = [pool.submit(load_batch, epoch, idx) for idx in batches]
            total, count = 0.0, 0
            for k, fut in enumerate(futures):
                x, y = fut.result()
                step = epoch * steps_per_epoch + k
                lr = cosine_lr(hyper.lr, step, total_steps) if config.schedule == "cosine" else hyper.lr
                loss = train_step(model, x, y, state, hyper, lr)
                if not math.isfinite(loss):
                    for f in futures[k + 1:]:
                        f.cancel()
                    raise DivergenceError(f"non-finite loss at epoch {epoch} step {k}", epoch=epoch, step=k)
                step_losses.append(loss)
                total += loss * len(y)
                count += len(y)
            scores = score_records(model, test_recs)
            auc = roc_auc(scores, [r.label for r in test_recs])
            entry = {"epoch": epoch, "train_loss": total / count, "test_auc": auc,
                     "seconds": round(time.perf_counter() - t0, 3)}
            history.append(entry)
            with history_path.open("a") as fh:
                fh.write(json.dumps(entry) + "\n")
            if auc > best_auc:
                best_auc, best_epoch = auc, epoch
                save_checkpoint(model, ckpt_path, {
                    "domain": config.domain.canonical, "seed": config.seed, "epoch": epoch,
                    "train_loss": entry["train_loss"], "test_auc": auc,
                })
            if on_epoch is not None:
                on_epoch(entry)
    return TrainResult(model, history, step_losses, best_epoch, best_auc, ckpt_path)


def read_history(path: "str | os.PathLike") -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
