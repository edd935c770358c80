"""3D-CNN and MViTv2 classifiers, parameter handling and checkpoints."""

from .base import CNN3D, FAMILIES, MVIT, ModelState, build_model, config_from_dict, forward, param_shapes
from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .cnn3d import Cnn3dConfig, cnn3d_features, cnn3d_forward, cnn3d_param_count
from .mvit import (
    MvitConfig,
    StageConfig,
    block_plan,
    mvit_forward,
    mvit_param_count,
    mvit_token_schedule,
    patch_grid,
    pooled_attention,
)

__all__ = [
    "CNN3D", "FAMILIES", "MVIT", "ModelState", "build_model", "config_from_dict", "forward", "param_shapes",
    "decode_checkpoint", "encode_checkpoint", "load_checkpoint", "save_checkpoint",
    "Cnn3dConfig", "cnn3d_features", "cnn3d_forward", "cnn3d_param_count",
    "MvitConfig", "StageConfig", "block_plan", "mvit_forward", "mvit_param_count",
    "mvit_token_schedule", "patch_grid", "pooled_attention",
]
