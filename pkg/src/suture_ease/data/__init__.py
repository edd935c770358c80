"""Clip files, manifests, frame sampling and augmentation."""

from .clipio import decode_clip, encode_clip, read_clip, write_clip
from .manifest import ClipRecord, filter_domain, read_manifest, split_videos, write_manifest
from .transforms import (
    CLIP_FRAMES,
    AugmentPolicy,
    augment,
    flip,
    normalize,
    prepare_clip,
    resize_bilinear,
    rotate,
    sample_frames,
)

__all__ = [
    "decode_clip", "encode_clip", "read_clip", "write_clip",
    "ClipRecord", "filter_domain", "read_manifest", "split_videos", "write_manifest",
    "CLIP_FRAMES", "AugmentPolicy", "augment", "flip", "normalize", "prepare_clip",
    "resize_bilinear", "rotate", "sample_frames",
]
