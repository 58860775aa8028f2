"""Exact operation-level FLOP accounting.

Convention (stated because absolute numbers depend on it; only orderings
are architecture-invariant):

* one multiply = 1, one add = 1, a fused multiply-add = 2;
* matmul m x k x n costs 2mkn; conv costs 2 * kh * kw * c_in * c_out per
  output position; bias adds are counted separately;
* per-element costs: gelu 8, softmax 5, layer_norm 8, affine_norm 2,
  scale 1, add 1, max-pool comparisons 1 per covered input element,
  mean 1 per input element plus 1 per output element;
* pure data movement (reshape, transpose, concatenation, assembling the
  patch grid, folding the class token into it) is free, so the
  cnn-ignore-ee and cnn-add-ee branches cost the same;
* dropout is identity at inference and costs nothing.

All costs are per single sample at inference. Counts are additive over
composed operations.
"""

from __future__ import annotations

from dataclasses import dataclass

from .branches import ARCHITECTURES, MIX_EXPANSION, conv_channels_for
from .vit import ViTConfig

__all__ = [
    "MatMulDesc",
    "Conv2dDesc",
    "ElementwiseDesc",
    "ELEMENTWISE_COSTS",
    "flops_of",
    "linear_descs",
    "encoder_layer_descs",
    "patch_embed_descs",
    "branch_descs",
    "final_head_descs",
    "backbone_prefix_flops",
    "branch_flops",
    "final_exit_flops",
    "cumulative_flops",
]

ELEMENTWISE_COSTS = {
    "add": 1,
    "mul": 1,
    "scale": 1,
    "gelu": 8,
    "softmax": 5,
    "layer_norm": 8,
    "affine_norm": 2,
    "max_compare": 1,
    "mean": 1,
}


@dataclass(frozen=True)
class MatMulDesc:
    m: int | None
    k: int | None
    n: int | None


@dataclass(frozen=True)
class Conv2dDesc:
    kh: int | None
    kw: int | None
    c_in: int | None
    c_out: int | None
    h_out: int | None
    w_out: int | None


@dataclass(frozen=True)
class ElementwiseDesc:
    kind: str
    count: int | None


def flops_of(desc) -> int:
    """FLOPs of one fully shaped op descriptor."""
    if isinstance(desc, MatMulDesc):
        dims = (desc.m, desc.k, desc.n)
    elif isinstance(desc, Conv2dDesc):
        dims = (desc.kh, desc.kw, desc.c_in, desc.c_out, desc.h_out, desc.w_out)
    elif isinstance(desc, ElementwiseDesc):
        if desc.kind not in ELEMENTWISE_COSTS:
            raise ValueError(f"unknown elementwise kind {desc.kind!r}")
        dims = (desc.count,)
    else:
        raise TypeError(f"not an op descriptor: {desc!r}")
    if any(d is None or d < 0 for d in dims):
        raise ValueError(f"unshaped descriptor: {desc!r}")
    if isinstance(desc, MatMulDesc):
        return 2 * desc.m * desc.k * desc.n
    if isinstance(desc, Conv2dDesc):
        return 2 * desc.kh * desc.kw * desc.c_in * desc.c_out * desc.h_out * desc.w_out
    return ELEMENTWISE_COSTS[desc.kind] * desc.count


def _total(descs) -> int:
    return sum(flops_of(d) for d in descs)


def linear_descs(rows: int, d_in: int, d_out: int) -> list:
    return [MatMulDesc(rows, d_in, d_out), ElementwiseDesc("add", rows * d_out)]


def _mean_descs(n_in: int, n_out: int) -> list:
    return [ElementwiseDesc("mean", n_in + n_out)]


def encoder_layer_descs(tokens: int, dim: int, heads: int, mlp_ratio: float) -> list:
    head_dim = dim // heads
    hidden = int(dim * mlp_ratio)
    descs = [ElementwiseDesc("layer_norm", tokens * dim)]
    for _ in range(3):  # q, k, v projections
        descs += linear_descs(tokens, dim, dim)
    descs += [
        MatMulDesc(heads * tokens, head_dim, tokens),  # scores
        ElementwiseDesc("scale", heads * tokens * tokens),
        ElementwiseDesc("softmax", heads * tokens * tokens),
        MatMulDesc(heads * tokens, tokens, head_dim),  # attention-weighted values
    ]
    descs += linear_descs(tokens, dim, dim)  # output projection
    descs += [ElementwiseDesc("add", tokens * dim)]  # residual
    descs += [ElementwiseDesc("layer_norm", tokens * dim)]
    descs += linear_descs(tokens, dim, hidden)
    descs += [ElementwiseDesc("gelu", tokens * hidden)]
    descs += linear_descs(tokens, hidden, dim)
    descs += [ElementwiseDesc("add", tokens * dim)]  # residual
    return descs


def patch_embed_descs(config: ViTConfig) -> list:
    n, d = config.num_patches, config.embed_dim
    return linear_descs(n, config.patch_dim, d) + [
        ElementwiseDesc("add", config.num_tokens * d)  # positional embedding
    ]


def final_head_descs(config: ViTConfig) -> list:
    d = config.embed_dim
    return [ElementwiseDesc("layer_norm", d)] + linear_descs(1, d, config.num_outputs)


def _head_mlp_descs(d_in: int, d_model: int, d_out: int) -> list:
    descs = linear_descs(1, d_in, 2 * d_model)
    descs += [ElementwiseDesc("gelu", 2 * d_model)]
    descs += linear_descs(1, 2 * d_model, d_model)
    descs += [ElementwiseDesc("gelu", d_model)]
    descs += linear_descs(1, d_model, d_out)
    return descs


def branch_descs(config: ViTConfig, arch: str, num_outputs: int | None = None) -> list:
    """Per-sample descriptors for one branch; identical at every location
    because intermediate sequences share one shape."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown branch architecture {arch!r}")
    d = config.embed_dim
    t = config.num_tokens
    k = num_outputs if num_outputs is not None else config.num_outputs

    if arch == "mlp-ee":
        return [ElementwiseDesc("layer_norm", d)] + _head_mlp_descs(d, d, k)

    if arch.startswith("cnn-"):
        side = config.grid_size
        c_in = 2 * d if arch == "cnn-project-ee" else d
        c_out = conv_channels_for(d)
        pooled_side = (side - 2) // 2 + 1
        descs = [
            Conv2dDesc(3, 3, c_in, c_out, side, side),
            ElementwiseDesc("add", side * side * c_out),  # conv bias
            ElementwiseDesc("gelu", side * side * c_out),
            ElementwiseDesc("max_compare", pooled_side * pooled_side * 4 * c_out),
        ]
        return descs + _head_mlp_descs(pooled_side * pooled_side * c_out, d, k)

    if arch == "vit-ee":
        descs = encoder_layer_descs(t, d, config.num_heads, config.mlp_ratio)
        descs += [ElementwiseDesc("layer_norm", d)]
        return descs + _head_mlp_descs(d, d, k)

    if arch == "mlp-mixer-ee":
        descs = [ElementwiseDesc("layer_norm", t * d)]
        descs += linear_descs(d, t, MIX_EXPANSION * t)
        descs += [ElementwiseDesc("gelu", d * MIX_EXPANSION * t)]
        descs += linear_descs(d, MIX_EXPANSION * t, t)
        descs += [ElementwiseDesc("add", t * d)]  # residual
        descs += [ElementwiseDesc("layer_norm", t * d)]
        descs += linear_descs(t, d, MIX_EXPANSION * d)
        descs += [ElementwiseDesc("gelu", t * MIX_EXPANSION * d)]
        descs += linear_descs(t, MIX_EXPANSION * d, d)
        descs += [ElementwiseDesc("add", t * d)]  # residual
        descs += _mean_descs(t * d, d)
        return descs + _head_mlp_descs(d, d, k)

    # resmlp-ee
    descs = [ElementwiseDesc("affine_norm", t * d)]
    descs += linear_descs(d, t, t)
    descs += [ElementwiseDesc("affine_norm", t * d)]
    descs += [ElementwiseDesc("add", t * d)]  # residual
    descs += [ElementwiseDesc("affine_norm", t * d)]
    descs += linear_descs(t, d, MIX_EXPANSION * d)
    descs += [ElementwiseDesc("gelu", t * MIX_EXPANSION * d)]
    descs += linear_descs(t, MIX_EXPANSION * d, d)
    descs += [ElementwiseDesc("affine_norm", t * d)]
    descs += [ElementwiseDesc("add", t * d)]  # residual
    descs += _mean_descs(t * d, d)
    return descs + _head_mlp_descs(d, d, k)


def _config_of(model_or_config) -> ViTConfig:
    if isinstance(model_or_config, ViTConfig):
        return model_or_config
    cfg = getattr(model_or_config, "config", None)
    if isinstance(cfg, ViTConfig):
        return cfg
    backbone = getattr(model_or_config, "backbone", None)
    if backbone is not None and isinstance(backbone.config, ViTConfig):
        return backbone.config
    raise TypeError(f"cannot extract a ViTConfig from {model_or_config!r}")


def backbone_prefix_flops(model_or_config, depth: int) -> int:
    """Patch embedding plus the first ``depth`` encoder layers."""
    cfg = _config_of(model_or_config)
    if not 0 <= depth <= cfg.depth:
        raise ValueError(f"depth {depth} outside 0..{cfg.depth}")
    layer = _total(encoder_layer_descs(cfg.num_tokens, cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio))
    return _total(patch_embed_descs(cfg)) + depth * layer


def branch_flops(model_or_config, arch: str, num_outputs: int | None = None) -> int:
    return _total(branch_descs(_config_of(model_or_config), arch, num_outputs))


def final_exit_flops(model_or_config) -> int:
    cfg = _config_of(model_or_config)
    return backbone_prefix_flops(cfg, cfg.depth) + _total(final_head_descs(cfg))


def cumulative_flops(model_or_config, location: int, arch: str, num_outputs: int | None = None) -> int:
    """Total FLOPs from the input through the branch at ``location``."""
    cfg = _config_of(model_or_config)
    if not 1 <= location <= cfg.depth:
        raise ValueError(f"branch location {location} outside 1..{cfg.depth}")
    return backbone_prefix_flops(cfg, location) + branch_flops(cfg, arch, num_outputs)
