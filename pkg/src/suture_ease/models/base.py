"""Parameter containers, initialisers and architecture dispatch."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..autodiff import Tensor

CNN3D = "CNN3D"
MVIT = "MViTv2"
FAMILIES = (CNN3D, MVIT)


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def kaiming_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


INITIALISERS: dict[str, Callable] = {
    "zeros": lambda rng, shape: np.zeros(shape),
    "ones": lambda rng, shape: np.ones(shape),
    "normal": trunc_normal,
    "conv": kaiming_uniform,
    "mean": lambda rng, shape: np.full(shape, 1.0 / np.prod(shape[1:])),
}


def init_params(spec: dict, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Draw every parameter of ``spec`` (name -> (shape, init kind)) in order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, kind) in spec.items():
        params[name] = Tensor(INITIALISERS[kind](rng, shape), dtype=dtype, requires_grad=True, name=name)
    return params


def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class ModelState:
    """An architecture tag, its config and the named weight tensors."""

    arch: str
    config: object
    params: dict[str, Tensor]
    metadata: dict = field(default_factory=dict)

    def forward(self, x) -> Tensor:
        return forward(self, x)

    __call__ = forward

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "ModelState":
        params = {k: Tensor(v.data, dtype=dtype, requires_grad=True, name=k) for k, v in self.params.items()}
        return ModelState(self.arch, self.config, params, dict(self.metadata))


def param_shapes(arch: str, config) -> dict:
    from .cnn3d import cnn3d_param_spec
    from .mvit import mvit_param_spec

    spec = cnn3d_param_spec(config) if arch == CNN3D else mvit_param_spec(config)
    return {k: shape for k, (shape, _) in spec.items()}


def build_model(arch: str, config=None, seed: int = 0, dtype=np.float32) -> ModelState:
    from .cnn3d import Cnn3dConfig, cnn3d_param_spec
    from .mvit import MvitConfig, mvit_param_spec

    if arch == CNN3D:
        config = config or Cnn3dConfig()
        spec = cnn3d_param_spec(config)
    elif arch == MVIT:
        config = config or MvitConfig()
        spec = mvit_param_spec(config)
    else:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {FAMILIES}")
    return ModelState(arch, config, init_params(spec, seed, dtype))


def config_from_dict(arch: str, d: dict):
    from .cnn3d import Cnn3dConfig
    from .mvit import MvitConfig

    return Cnn3dConfig.from_dict(d) if arch == CNN3D else MvitConfig.from_dict(d)


def forward(state: ModelState, x) -> Tensor:
    from .cnn3d import cnn3d_forward
    from .mvit import mvit_forward

    if state.arch == CNN3D:
        return cnn3d_forward(state.config, state.params, x)
    return mvit_forward(state.config, state.params, x)
