"""Desk-scale multiscale vision transformer (MViTv2 style).

Tokens come from a strided 3-D patch embedding and shrink stage by stage via
pooled attention. Each attention block supports residual pooling (the pooled
query is added back to the attention output) and decomposed relative
position terms, one learned table per spatiotemporal axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import conv_output_shape
from ..errors import DimensionError, GeometryError


@dataclass(frozen=True)
class StageConfig:
    depth: int = 2
    heads: int = 1
    dim_mul: int = 1
    q_stride: tuple = (1, 1, 1)
    kv_stride: tuple = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "q_stride", tuple(int(s) for s in self.q_stride))
        object.__setattr__(self, "kv_stride", tuple(int(s) for s in self.kv_stride))
        if self.depth < 1 or self.heads < 1 or self.dim_mul < 1:
            raise GeometryError(f"invalid stage {self}")
        if len(self.q_stride) != 3 or len(self.kv_stride) != 3 or min(self.q_stride + self.kv_stride) < 1:
            raise GeometryError(f"stage strides must be three positive integers, got {self}")


def _default_stages():
    return (
        StageConfig(depth=2, heads=1, dim_mul=1, q_stride=(1, 1, 1), kv_stride=(1, 2, 2)),
        StageConfig(depth=2, heads=2, dim_mul=2, q_stride=(1, 2, 2), kv_stride=(1, 1, 1)),
    )


@dataclass(frozen=True)
class MvitConfig:
    in_channels: int = 3
    frames: int = 16
    height: int = 224
    width: int = 224
    embed_dim: int = 32
    patch_kernel: tuple = (3, 7, 7)
    patch_stride: tuple = (2, 4, 4)
    patch_padding: tuple = (1, 3, 3)
    stages: tuple = field(default_factory=_default_stages)
    mlp_ratio: float = 4.0
    use_rel_pos: bool = True
    use_residual_pool: bool = True
    pool_mode: str = "avg"
    eps: float = 1e-6

    def __post_init__(self):
        for name in ("patch_kernel", "patch_stride", "patch_padding"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        stages = tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if self.pool_mode not in ("avg", "conv"):
            raise GeometryError(f"pool_mode must be 'avg' or 'conv', got {self.pool_mode!r}")
        if not stages:
            raise GeometryError("at least one stage is required")
        block_plan(self)  # validates heads and geometry

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("patch_kernel", "patch_stride", "patch_padding"):
            d[name] = list(d[name])
        d["stages"] = [
            {**asdict(s), "q_stride": list(s.q_stride), "kv_stride": list(s.kv_stride)} for s in self.stages
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MvitConfig":
        d = dict(d)
        if "stages" in d:
            d["stages"] = tuple(StageConfig(**s) for s in d["stages"])
        return cls(**d)


@dataclass(frozen=True)
class BlockPlan:
    index: int
    stage: int
    dim_in: int
    dim_out: int
    heads: int
    q_stride: tuple
    kv_stride: tuple
    grid_in: tuple
    q_grid: tuple
    kv_grid: tuple


def _pooled(grid, stride):
    return tuple(-(-g // s) for g, s in zip(grid, stride))


def patch_grid(config: MvitConfig) -> tuple:
    return conv_output_shape(
        (config.frames, config.height, config.width),
        config.patch_kernel, config.patch_stride, config.patch_padding,
    )


def block_plan(config: MvitConfig) -> list[BlockPlan]:
    """Per-block dims, heads, strides and token grids. The first block of a
    stage applies the stage's dim multiplier and query stride."""
    grid = patch_grid(config)
    dim = config.embed_dim
    plans = []
    for s, stage in enumerate(config.stages):
        for j in range(stage.depth):
            first = j == 0
            dim_out = dim * stage.dim_mul if first else dim
            if dim_out % stage.heads:
                raise GeometryError(f"stage {s} block {j}: dim {dim_out} not divisible by {stage.heads} heads")
            q_stride = stage.q_stride if first else (1, 1, 1)
            q_grid = _pooled(grid, q_stride)
            kv_grid = _pooled(grid, stage.kv_stride)
            plans.append(BlockPlan(len(plans), s, dim, dim_out, stage.heads, q_stride, stage.kv_stride,
                                   grid, q_grid, kv_grid))
            grid, dim = q_grid, dim_out
    return plans


def mvit_token_schedule(config: MvitConfig) -> list[tuple]:
    """Token grid after the patch embedding and after every block."""
    plans = block_plan(config)
    return [plans[0].grid_in] + [p.q_grid for p in plans]


def _rel_sizes(plan: BlockPlan):
    return [2 * max(q, k) - 1 for q, k in zip(plan.q_grid, plan.kv_grid)]


def mvit_param_spec(config: MvitConfig) -> dict:
    spec = {
        "patch.weight": ((config.embed_dim, config.in_channels) + config.patch_kernel, "conv"),
        "patch.bias": ((config.embed_dim,), "zeros"),
    }
    for plan in block_plan(config):
        p = f"blocks.{plan.index}."
        d_in, d_out = plan.dim_in, plan.dim_out
        head_dim = d_out // plan.heads
        spec[p + "norm1.weight"] = ((d_in,), "ones")
        spec[p + "norm1.bias"] = ((d_in,), "zeros")
        for name in ("q", "k", "v"):
            spec[p + f"attn.{name}.weight"] = ((d_in, d_out), "normal")
            spec[p + f"attn.{name}.bias"] = ((d_out,), "zeros")
        if config.pool_mode == "conv":
            for name, stride in (("q", plan.q_stride), ("k", plan.kv_stride), ("v", plan.kv_stride)):
                if stride != (1, 1, 1):
                    spec[p + f"attn.pool_{name}.weight"] = ((head_dim,) + stride, "mean")
                    spec[p + f"attn.norm_{name}.weight"] = ((head_dim,), "ones")
                    spec[p + f"attn.norm_{name}.bias"] = ((head_dim,), "zeros")
        if config.use_rel_pos:
            for axis, size in zip("thw", _rel_sizes(plan)):
                spec[p + f"attn.rel_pos_{axis}"] = ((size, head_dim), "normal")
        spec[p + "attn.proj.weight"] = ((d_out, d_out), "normal")
        spec[p + "attn.proj.bias"] = ((d_out,), "zeros")
        if d_in != d_out:
            spec[p + "proj.weight"] = ((d_in, d_out), "normal")
            spec[p + "proj.bias"] = ((d_out,), "zeros")
        hidden = int(d_out * config.mlp_ratio)
        spec[p + "norm2.weight"] = ((d_out,), "ones")
        spec[p + "norm2.bias"] = ((d_out,), "zeros")
        spec[p + "mlp.fc1.weight"] = ((d_out, hidden), "normal")
        spec[p + "mlp.fc1.bias"] = ((hidden,), "zeros")
        spec[p + "mlp.fc2.weight"] = ((hidden, d_out), "normal")
        spec[p + "mlp.fc2.bias"] = ((d_out,), "zeros")
    d_last = block_plan(config)[-1].dim_out
    spec["norm.weight"] = ((d_last,), "ones")
    spec["norm.bias"] = ((d_last,), "zeros")
    spec["head.weight"] = ((d_last, 1), "normal")
    spec["head.bias"] = ((1,), "zeros")
    return spec


def mvit_param_count(config: MvitConfig) -> int:
    """Closed-form parameter count.

    patch: D0*C*kt*kh*kw + D0. Per block with d_in -> d_out, h heads,
    head dim c = d_out/h and MLP hidden m:
      2*d_in (norm1) + 3*(d_in*d_out + d_out) (qkv) + d_out^2 + d_out (proj)
      + [d_in != d_out] (d_in*d_out + d_out) (shortcut)
      + 2*d_out (norm2) + 2*d_out*m + m + d_out (MLP)
      + rel-pos: c * sum_axes (2*max(q_a, kv_a) - 1)
      + conv pooling: for each pooled q/k/v, c*prod(stride) + 2c.
    Final norm 2*d_last and head d_last + 1.
    """
    kt, kh, kw = config.patch_kernel
    total = config.embed_dim * (config.in_channels * kt * kh * kw + 1)
    for plan in block_plan(config):
        di, do = plan.dim_in, plan.dim_out
        c = do // plan.heads
        m = int(do * config.mlp_ratio)
        total += 2 * di + 3 * (di * do + do) + do * do + do
        if di != do:
            total += di * do + do
        total += 2 * do + 2 * do * m + m + do
        if config.use_rel_pos:
            total += c * sum(_rel_sizes(plan))
        if config.pool_mode == "conv":
            for stride in (plan.q_stride, plan.kv_stride, plan.kv_stride):
                if stride != (1, 1, 1):
                    total += c * math.prod(stride) + 2 * c
    d_last = block_plan(config)[-1].dim_out
    return total + 2 * d_last + d_last + 1


def _rel_index(q_size: int, k_size: int) -> np.ndarray:
    """Offset table index for every (query, key) pair along one axis; keys
    and queries at different resolutions are compared on the finer scale."""
    q_ratio = max(k_size / q_size, 1.0)
    k_ratio = max(q_size / k_size, 1.0)
    dist = (np.arange(q_size)[:, None] * q_ratio - np.arange(k_size)[None, :] * k_ratio
            + (k_size - 1) * k_ratio)
    return dist.astype(np.intp)


def _add_rel_pos(attn, q, q_grid, kv_grid, params):
    B, h, _, c = q.shape
    qt, qh, qw = q_grid
    kt, kh, kw = kv_grid
    r_q = ad.reshape(q, (B, h, qt, qh, qw, c))
    rt = ad.take(params["rel_pos_t"], _rel_index(qt, kt))
    rh = ad.take(params["rel_pos_h"], _rel_index(qh, kh))
    rw = ad.take(params["rel_pos_w"], _rel_index(qw, kw))
    rel_t = ad.reshape(ad.einsum("bntyxc,tkc->bntyxk", r_q, rt), (B, h, qt, qh, qw, kt, 1, 1))
    rel_h = ad.reshape(ad.einsum("bntyxc,ykc->bntyxk", r_q, rh), (B, h, qt, qh, qw, 1, kh, 1))
    rel_w = ad.reshape(ad.einsum("bntyxc,xkc->bntyxk", r_q, rw), (B, h, qt, qh, qw, 1, 1, kw))
    full = ad.reshape(attn, (B, h, qt, qh, qw, kt, kh, kw))
    full = ad.add(ad.add(ad.add(full, rel_t), rel_h), rel_w)
    return ad.reshape(full, attn.shape)


def _pool(x, grid, stride, params, name, eps):
    weight = params.get(f"pool_{name}.weight")
    out, new_grid = ad.grid_pool(x, grid, stride, weight)
    if weight is not None:
        out = ad.layernorm(out, params[f"norm_{name}.weight"], params[f"norm_{name}.bias"], eps)
    return out, new_grid


def pooled_attention(tokens, grid, params, q_stride=(1, 1, 1), kv_stride=(1, 1, 1), heads=1,
                     use_rel_pos=False, use_residual_pool=False, eps=1e-6):
    """Multi-head attention with pooled queries, keys and values.

    ``tokens`` is (B, L, D) over a (T, H, W) grid with L = T*H*W. ``params``
    holds ``q/k/v.weight`` (D, D_out) and biases, plus ``rel_pos_{t,h,w}``
    when ``use_rel_pos`` and ``pool_{q,k,v}.weight``/``norm_*`` for learned
    pooling. Returns the merged-head output (B, L_q, D_out) before the output
    projection, and the pooled query grid.
    """
    tokens = ad.as_tensor(tokens)
    B, L, _ = tokens.shape
    if L != math.prod(grid):
        raise GeometryError(f"token count {L} does not match grid {tuple(grid)}")
    d_out = params["q.weight"].shape[1]
    if d_out % heads:
        raise DimensionError(f"output dim {d_out} not divisible by {heads} heads")
    c = d_out // heads

    def project(name):
        y = ad.linear(tokens, params[f"{name}.weight"], params[f"{name}.bias"])
        return ad.transpose(ad.reshape(y, (B, L, heads, c)), (0, 2, 1, 3))

    q, q_grid = _pool(project("q"), grid, q_stride, params, "q", eps)
    k, kv_grid = _pool(project("k"), grid, kv_stride, params, "k", eps)
    v, _ = _pool(project("v"), grid, kv_stride, params, "v", eps)

    attn = ad.matmul(ad.mul(q, 1.0 / math.sqrt(c)), ad.transpose(k, (0, 1, 3, 2)))
    if use_rel_pos:
        attn = _add_rel_pos(attn, q, q_grid, kv_grid, params)
    attn = ad.softmax(attn, axis=-1)
    z = ad.matmul(attn, v)
    if use_residual_pool:
        z = ad.add(z, q)
    z = ad.reshape(ad.transpose(z, (0, 2, 1, 3)), (B, math.prod(q_grid), d_out))
    return z, q_grid


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def mvit_block(config: MvitConfig, plan: BlockPlan, params, x):
    p = _sub(params, f"blocks.{plan.index}.")
    xn = ad.layernorm(x, p["norm1.weight"], p["norm1.bias"], config.eps)
    shortcut = ad.linear(xn, p["proj.weight"], p["proj.bias"]) if plan.dim_in != plan.dim_out else x
    shortcut, _ = ad.grid_pool(shortcut, plan.grid_in, plan.q_stride)
    z, _ = pooled_attention(
        xn, plan.grid_in, _sub(p, "attn."), plan.q_stride, plan.kv_stride, plan.heads,
        config.use_rel_pos, config.use_residual_pool, config.eps,
    )
    x = ad.add(shortcut, ad.linear(z, p["attn.proj.weight"], p["attn.proj.bias"]))
    h = ad.layernorm(x, p["norm2.weight"], p["norm2.bias"], config.eps)
    h = ad.gelu(ad.linear(h, p["mlp.fc1.weight"], p["mlp.fc1.bias"]))
    h = ad.linear(h, p["mlp.fc2.weight"], p["mlp.fc2.bias"])
    return ad.add(x, h)


def patchify(config: MvitConfig, params, x):
    x = ad.as_tensor(x)
    expected = (config.in_channels, config.frames, config.height, config.width)
    if x.ndim != 5 or tuple(x.shape[1:]) != expected:
        raise GeometryError(f"patch embedding: expected input (B, {', '.join(map(str, expected))}), got {x.shape}")
    y = ad.conv3d(x, params["patch.weight"], params["patch.bias"], config.patch_stride, config.patch_padding)
    B, D, T, H, W = y.shape
    return ad.reshape(ad.transpose(y, (0, 2, 3, 4, 1)), (B, T * H * W, D)), (T, H, W)


def mvit_features(config: MvitConfig, params, x):
    tokens, grid = patchify(config, params, x)
    for plan in block_plan(config):
        if tuple(plan.grid_in) != tuple(grid):
            raise GeometryError(f"stage {plan.stage} block {plan.index}: grid {grid} != planned {plan.grid_in}")
        tokens = mvit_block(config, plan, params, tokens)
        grid = plan.q_grid
    tokens = ad.layernorm(tokens, params["norm.weight"], params["norm.bias"], config.eps)
    return ad.mean(tokens, axis=1)


def mvit_forward(config: MvitConfig, params, x):
    """(B, C, T, H, W) clip batch -> (B, 1) logits."""
    feats = mvit_features(config, params, x)
    return ad.linear(feats, params["head.weight"], params["head.bias"])
