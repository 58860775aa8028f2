"""Vision Transformer backbone that exposes every intermediate token sequence.

The backbone cuts the image into a row-major grid of patches, projects each
patch, prepends a learnable classification token, adds learned positional
embeddings, runs a stack of pre-norm encoder layers and classifies from the
final classification token. ``forward_collect`` surfaces the sequence after
every encoder layer so exit branches can attach anywhere.

Weights are immutable during inference and may be shared read-only across
threads; training mutates them single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Dropout, LayerNorm, Linear, Module, MLP
from .tensor import (
    ShapeMismatchError,
    Tensor,
    broadcast_to,
    concat,
    make_rng,
    matmul,
    reshape,
    softmax,
    swapaxes,
    trunc_normal,
)

__all__ = ["ViTConfig", "MultiHeadAttention", "EncoderLayer", "PatchEmbed", "ViTBackbone"]


@dataclass(frozen=True)
class ViTConfig:
    """Desk-scale defaults: small enough for minutes of CPU training, deep
    enough to place several distinct exits."""

    image_size: int = 28
    patch_size: int = 7
    channels: int = 1
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 6
    mlp_ratio: float = 2.0
    num_outputs: int = 10
    dropout: float = 0.1

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"patch size {self.patch_size} must divide image size {self.image_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"head count {self.num_heads} must divide embed dim {self.embed_dim}")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


class MultiHeadAttention(Module):
    """Scaled dot-product attention over all tokens, several heads
    concatenated and projected back to the embed dim."""

    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int):
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.num_heads = num_heads
        self.head_dim = dim // num_heads

    def _split_heads(self, x: Tensor, bsz: int, t: int) -> Tensor:
        return swapaxes(reshape(x, (bsz, t, self.num_heads, self.head_dim)), 1, 2)

    def __call__(self, x: Tensor, return_attn: bool = False):
        bsz, t, dim = x.shape
        q = self._split_heads(self.wq(x), bsz, t)
        k = self._split_heads(self.wk(x), bsz, t)
        v = self._split_heads(self.wv(x), bsz, t)
        scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.head_dim))
        attn = softmax(scores, axis=-1)
        z = matmul(attn, v)
        out = self.wo(reshape(swapaxes(z, 1, 2), (bsz, t, dim)))
        if return_attn:
            return out, attn
        return out


class EncoderLayer(Module):
    """Pre-norm residual block: x + MHA(Norm(x)), then + MLP(Norm(.))."""

    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int, mlp_ratio: float, drop: float):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, num_heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, int(dim * mlp_ratio), drop)
        self.drop = Dropout(drop)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        x = x + self.drop(self.attn(self.norm1(x)), rng)
        return x + self.mlp(self.norm2(x), rng)


class PatchEmbed(Module):
    """Row-major patch grid -> linear projection -> class token -> positions."""

    def __init__(self, rng: np.random.Generator, config: ViTConfig):
        self.proj = Linear(rng, config.patch_dim, config.embed_dim)
        self.cls_token = Tensor(np.zeros((1, 1, config.embed_dim)), requires_grad=True)
        self.pos = Tensor(
            trunc_normal(rng, (config.num_tokens, config.embed_dim)), requires_grad=True
        )
        self.drop = Dropout(config.dropout)
        self.config = config

    def patchify(self, images: Tensor) -> Tensor:
        cfg = self.config
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeMismatchError(
                f"patch_embed: image shape {images.shape[1:]} does not match config {expected}"
            )
        bsz = images.shape[0]
        g, p, c = cfg.grid_size, cfg.patch_size, cfg.channels
        x = reshape(images, (bsz, g, p, g, p, c))
        x = swapaxes(x, 2, 3)  # [B, g, g, p, p, C], grid row-major
        return reshape(x, (bsz, cfg.num_patches, cfg.patch_dim))

    def __call__(self, images: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        bsz = images.shape[0]
        tokens = self.proj(self.patchify(images))
        cls = broadcast_to(self.cls_token, (bsz, 1, self.config.embed_dim))
        seq = concat([cls, tokens], axis=1) + self.pos
        return self.drop(seq, rng)


class ViTBackbone(Module):
    """Encoder stack plus a single-dense-layer classification head reading
    the final classification token."""

    def __init__(self, config: ViTConfig, seed: int = 0):
        self.config = config
        self.rng = make_rng(seed)
        self.patch_embed = PatchEmbed(self.rng, config)
        self.layers = [
            EncoderLayer(self.rng, config.embed_dim, config.num_heads, config.mlp_ratio, config.dropout)
            for _ in range(config.depth)
        ]
        self.final_norm = LayerNorm(config.embed_dim)
        self.head = Linear(self.rng, config.embed_dim, config.num_outputs)

    def head_logits(self, seq: Tensor) -> Tensor:
        """Final-exit output computed from the class token of a sequence."""
        return self.head(self.final_norm(seq[:, 0, :]))

    def forward_collect(self, images: Tensor) -> tuple[list[Tensor], Tensor]:
        """Run the full stack; returns the sequence after every layer plus
        the final logits."""
        rng = self.rng if self.training else None
        x = self.patch_embed(images, rng)
        seqs: list[Tensor] = []
        for layer in self.layers:
            x = layer(x, rng)
            seqs.append(x)
        return seqs, self.head_logits(seqs[-1])

    def forward_prefix(self, images: Tensor, depth: int) -> Tensor:
        """Sequence after the first ``depth`` encoder layers."""
        if not 1 <= depth <= self.config.depth:
            raise ValueError(f"depth {depth} outside 1..{self.config.depth}")
        rng = self.rng if self.training else None
        x = self.patch_embed(images, rng)
        for layer in self.layers[:depth]:
            x = layer(x, rng)
        return x

    def __call__(self, images: Tensor) -> Tensor:
        return self.forward_collect(images)[1]
