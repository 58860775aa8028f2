"""The seven early-exit branch architectures.

Every branch consumes the token sequence produced by an encoder layer
(class token at index 0, patch tokens after it) and emits one output row
per sample. Spatial branches rebuild the row-major patch grid before
convolving; sequence branches run one mixing layer and pool over tokens.

All branches share the same three-dense-layer output head, which is what
distinguishes them from the backbone's single-layer classification head.

Architecture names (stable, used in CLI flags, checkpoints and CSV):
mlp-ee, cnn-ignore-ee, cnn-add-ee, cnn-project-ee, vit-ee, mlp-mixer-ee,
resmlp-ee.
"""

from __future__ import annotations

import math

import numpy as np

from .layers import AffineNorm, Conv2d, Dropout, LayerNorm, Linear, Module
from .tensor import (
    ShapeMismatchError,
    Tensor,
    broadcast_to,
    concat,
    gelu,
    global_avg_pool,
    make_rng,
    maxpool2d,
    reshape,
    swapaxes,
)
from .vit import EncoderLayer, ViTConfig

__all__ = [
    "ARCHITECTURES",
    "TOKEN_MODES",
    "BranchHeadMLP",
    "MixerLayer",
    "ResMlpLayer",
    "ExitBranch",
    "MlpExit",
    "CnnExit",
    "VitExit",
    "MixerExit",
    "ResMlpExit",
    "to_grid",
    "make_branch",
    "conv_channels_for",
]

ARCHITECTURES = (
    "mlp-ee",
    "cnn-ignore-ee",
    "cnn-add-ee",
    "cnn-project-ee",
    "vit-ee",
    "mlp-mixer-ee",
    "resmlp-ee",
)

TOKEN_MODES = ("ignore", "add", "project")

# Mixing-layer hidden dims expand 2x their input dim; the CNN branches use
# embed_dim // 4 conv filters so the branch cost ladder stays
# mlp < cnn-ignore = cnn-add < cnn-project < resmlp/mixer < vit.
MIX_EXPANSION = 2


def conv_channels_for(dim: int) -> int:
    return max(1, dim // 4)


def to_grid(seq: Tensor, token_mode: str) -> Tensor:
    """Reshape patch tokens into their sqrt(N) x sqrt(N) image-order grid.

    The class token is folded in per ``token_mode``: added to every patch,
    concatenated to every patch (doubling channels), or discarded. Grid cell
    (i, j) holds patch token i*sqrt(N) + j + 1.
    """
    if token_mode not in TOKEN_MODES:
        raise ValueError(f"token_mode must be one of {TOKEN_MODES}, got {token_mode!r}")
    bsz, t, dim = seq.shape
    n = t - 1
    side = math.isqrt(n)
    if side * side != n:
        raise ValueError(f"to_grid: patch count {n} is not a perfect square")
    cls = seq[:, 0:1, :]
    patches = seq[:, 1:, :]
    if token_mode == "add":
        patches = patches + cls
    elif token_mode == "project":
        patches = concat([patches, broadcast_to(cls, (bsz, n, dim))], axis=-1)
        dim = 2 * dim
    return reshape(patches, (bsz, side, side, dim))


class BranchHeadMLP(Module):
    """Three dense layers with two dropout layers in between; hidden sizes
    2*d_model then d_model."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_model: int, d_out: int, drop: float):
        self.fc1 = Linear(rng, d_in, 2 * d_model)
        self.fc2 = Linear(rng, 2 * d_model, d_model)
        self.fc3 = Linear(rng, d_model, d_out)
        self.drop = Dropout(drop)

    def __call__(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        x = self.drop(gelu(self.fc1(x)), rng)
        x = self.drop(gelu(self.fc2(x)), rng)
        return self.fc3(x)


class MixerLayer(Module):
    """Token mixing then channel mixing, each behind a layer norm and a
    residual: U = X + f2(gelu(f1(Norm(X)^T)))^T, Y = U + f4(gelu(f3(Norm(U))))."""

    def __init__(self, rng: np.random.Generator, tokens: int, dim: int):
        self.norm1 = LayerNorm(dim)
        self.f1 = Linear(rng, tokens, MIX_EXPANSION * tokens)
        self.f2 = Linear(rng, MIX_EXPANSION * tokens, tokens)
        self.norm2 = LayerNorm(dim)
        self.f3 = Linear(rng, dim, MIX_EXPANSION * dim)
        self.f4 = Linear(rng, MIX_EXPANSION * dim, dim)
        self.tokens = tokens

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-2] != self.tokens:
            raise ShapeMismatchError(
                f"mixer layer trained for {self.tokens} tokens, got {x.shape[-2]}"
            )
        y = swapaxes(self.norm1(x), -1, -2)
        y = self.f2(gelu(self.f1(y)))
        u = x + swapaxes(y, -1, -2)
        return u + self.f4(gelu(self.f3(self.norm2(u))))


class ResMlpLayer(Module):
    """Cross-patch then cross-channel sublayers with affine transforms in
    place of statistics: U = X + Aff(f1(Aff(X)^T)^T),
    Y = U + Aff(f3(gelu(f2(Aff(U)))))."""

    def __init__(self, rng: np.random.Generator, tokens: int, dim: int):
        self.aff_in1 = AffineNorm(dim)
        self.f1 = Linear(rng, tokens, tokens)
        self.aff_out1 = AffineNorm(dim)
        self.aff_in2 = AffineNorm(dim)
        self.f2 = Linear(rng, dim, MIX_EXPANSION * dim)
        self.f3 = Linear(rng, MIX_EXPANSION * dim, dim)
        self.aff_out2 = AffineNorm(dim)
        self.tokens = tokens

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-2] != self.tokens:
            raise ShapeMismatchError(
                f"resmlp layer trained for {self.tokens} tokens, got {x.shape[-2]}"
            )
        y = swapaxes(self.f1(swapaxes(self.aff_in1(x), -1, -2)), -1, -2)
        u = x + self.aff_out1(y)
        return u + self.aff_out2(self.f3(gelu(self.f2(self.aff_in2(u)))))


class ExitBranch(Module):
    """Base: one early-exit head attachable after any encoder layer."""

    arch: str = ""

    def __call__(self, seq: Tensor) -> Tensor:
        raise NotImplementedError

    def _dropout_rng(self):
        return self.rng if self.training else None


class MlpExit(ExitBranch):
    """Normalize the sequence, classify from the class token alone."""

    arch = "mlp-ee"

    def __init__(self, rng: np.random.Generator, config: ViTConfig, num_outputs: int):
        self.rng = rng
        self.norm = LayerNorm(config.embed_dim)
        self.head = BranchHeadMLP(rng, config.embed_dim, config.embed_dim, num_outputs, config.dropout)

    def __call__(self, seq: Tensor) -> Tensor:
        return self.head(self.norm(seq[:, 0, :]), self._dropout_rng())


class CnnExit(ExitBranch):
    """Patch grid -> 3x3 conv -> GELU -> 2x2 max pool -> flatten -> head."""

    def __init__(self, rng: np.random.Generator, config: ViTConfig, token_mode: str, num_outputs: int):
        self.rng = rng
        self.token_mode = token_mode
        d = config.embed_dim
        c_in = 2 * d if token_mode == "project" else d
        c_out = conv_channels_for(d)
        self.conv = Conv2d(rng, c_in, c_out, kernel=3, stride=1, padding=1)
        pooled_side = (config.grid_size - 2) // 2 + 1
        self.head = BranchHeadMLP(rng, pooled_side * pooled_side * c_out, d, num_outputs, config.dropout)
        self.arch = f"cnn-{token_mode}-ee"

    def __call__(self, seq: Tensor) -> Tensor:
        grid = to_grid(seq, self.token_mode)
        y = maxpool2d(gelu(self.conv(grid)), window=2, stride=2)
        bsz = y.shape[0]
        flat = reshape(y, (bsz, y.shape[1] * y.shape[2] * y.shape[3]))
        return self.head(flat, self._dropout_rng())


class VitExit(ExitBranch):
    """One fresh encoder layer (backbone hyperparameters), then normalize
    and classify from the class token."""

    arch = "vit-ee"

    def __init__(self, rng: np.random.Generator, config: ViTConfig, num_outputs: int):
        self.rng = rng
        self.encoder = EncoderLayer(
            rng, config.embed_dim, config.num_heads, config.mlp_ratio, config.dropout
        )
        self.norm = LayerNorm(config.embed_dim)
        self.head = BranchHeadMLP(rng, config.embed_dim, config.embed_dim, num_outputs, config.dropout)

    def __call__(self, seq: Tensor) -> Tensor:
        rng = self._dropout_rng()
        y = self.encoder(seq, rng)
        return self.head(self.norm(y[:, 0, :]), rng)


class MixerExit(ExitBranch):
    """One mixer layer over all tokens, global average pool, head."""

    arch = "mlp-mixer-ee"

    def __init__(
        self,
        rng: np.random.Generator,
        config: ViTConfig,
        num_outputs: int,
        pool_includes_cls: bool = True,
    ):
        self.rng = rng
        self.layer = MixerLayer(rng, config.num_tokens, config.embed_dim)
        self.head = BranchHeadMLP(rng, config.embed_dim, config.embed_dim, num_outputs, config.dropout)
        self.pool_includes_cls = pool_includes_cls

    def __call__(self, seq: Tensor) -> Tensor:
        y = self.layer(seq)
        pooled = global_avg_pool(y if self.pool_includes_cls else y[:, 1:, :], axis=-2)
        return self.head(pooled, self._dropout_rng())


class ResMlpExit(ExitBranch):
    """One ResMLP layer over all tokens, global average pool, head."""

    arch = "resmlp-ee"

    def __init__(
        self,
        rng: np.random.Generator,
        config: ViTConfig,
        num_outputs: int,
        pool_includes_cls: bool = True,
    ):
        self.rng = rng
        self.layer = ResMlpLayer(rng, config.num_tokens, config.embed_dim)
        self.head = BranchHeadMLP(rng, config.embed_dim, config.embed_dim, num_outputs, config.dropout)
        self.pool_includes_cls = pool_includes_cls

    def __call__(self, seq: Tensor) -> Tensor:
        y = self.layer(seq)
        pooled = global_avg_pool(y if self.pool_includes_cls else y[:, 1:, :], axis=-2)
        return self.head(pooled, self._dropout_rng())


def make_branch(
    arch: str,
    config: ViTConfig,
    seed: int = 0,
    num_outputs: int | None = None,
    pool_includes_cls: bool = True,
) -> ExitBranch:
    """Construct a branch by architecture name; its weights come from a
    Philox stream seeded with ``seed``."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown branch architecture {arch!r}; expected one of {ARCHITECTURES}")
    rng = make_rng(seed)
    k = num_outputs if num_outputs is not None else config.num_outputs
    if arch == "mlp-ee":
        return MlpExit(rng, config, k)
    if arch == "vit-ee":
        return VitExit(rng, config, k)
    if arch == "mlp-mixer-ee":
        return MixerExit(rng, config, k, pool_includes_cls)
    if arch == "resmlp-ee":
        return ResMlpExit(rng, config, k, pool_includes_cls)
    return CnnExit(rng, config, arch.split("-")[1], k)
