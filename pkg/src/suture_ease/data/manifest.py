"""JSONL dataset manifests and the video-level train/test split."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..domains import DomainKey
from ..errors import ContractError, DataError, EaseError

FIELDS = ("video_id", "stitch_idx", "domain", "label", "path", "split")
SPLITS = ("train", "test", "unassigned")


@dataclass(frozen=True)
class ClipRecord:
    video_id: str
    stitch_idx: int
    domain: DomainKey
    label: int
    path: Path
    split: str = "unassigned"

    def __post_init__(self):
        if isinstance(self.domain, str):
            object.__setattr__(self, "domain", DomainKey.parse(self.domain))
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}", video_id=self.video_id)
        if self.stitch_idx < 0:
            raise DataError(f"stitch_idx must be >= 0, got {self.stitch_idx}", video_id=self.video_id)
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def key(self):
        return (self.video_id, self.stitch_idx, self.domain)


def validate(records: Sequence[ClipRecord]) -> None:
    seen = set()
    for r in records:
        if r.key in seen:
            raise DataError(
                "duplicate (video_id, stitch_idx, domain)",
                video_id=r.video_id, stitch_idx=r.stitch_idx, domain=r.domain.canonical,
            )
        seen.add(r.key)


def read_manifest(path: "str | os.PathLike") -> list[ClipRecord]:
    """Load a manifest; clip paths are resolved relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    records = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc}", path=str(path)) from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if set(obj) != set(FIELDS):
                raise DataError(f"manifest fields must be exactly {FIELDS}, got {sorted(obj)}")
            records.append(ClipRecord(
                video_id=str(obj["video_id"]),
                stitch_idx=int(obj["stitch_idx"]),
                domain=DomainKey.parse(obj["domain"]),
                label=int(obj["label"]),
                path=(base / obj["path"]),
                split=obj["split"],
            ))
        except (json.JSONDecodeError, EaseError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}", path=str(path), line=lineno) from exc
    validate(records)
    return records


def write_manifest(records: Iterable[ClipRecord], path: "str | os.PathLike") -> Path:
    path = Path(path)
    records = list(records)
    validate(records)
    base = path.parent.resolve()
    lines = []
    for r in records:
        rel = os.path.relpath(Path(r.path).resolve(), base)
        lines.append(json.dumps({
            "video_id": r.video_id,
            "stitch_idx": r.stitch_idx,
            "domain": r.domain.canonical,
            "label": r.label,
            "path": Path(rel).as_posix(),
            "split": r.split,
        }))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines))
    return path


def split_videos(records: Sequence[ClipRecord], test_fraction: float = 0.2, seed: int = 0) -> list[ClipRecord]:
    """Assign every record to train or test, whole videos at a time.

    ``round(test_fraction * n_videos)`` videos (half-up) go to test, picked by a
    seeded permutation of the sorted video ids.
    """
    if not 0 < test_fraction < 1:
        raise ContractError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    videos = sorted({r.video_id for r in records})
    if len(videos) < 2:
        raise ContractError(f"need at least 2 videos to split, got {len(videos)}")
    n_test = int(math.floor(test_fraction * len(videos) + 0.5))
    n_test = min(max(n_test, 1), len(videos) - 1)
    order = np.random.default_rng(seed).permutation(len(videos))
    test = {videos[i] for i in order[:n_test]}
    return [replace(r, split="test" if r.video_id in test else "train") for r in records]


def filter_domain(records: Sequence[ClipRecord], domain: DomainKey, split: "str | None" = None) -> list[ClipRecord]:
    return [r for r in records if r.domain == domain and (split is None or r.split == split)]
