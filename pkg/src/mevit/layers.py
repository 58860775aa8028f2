"""Parameter-holding building blocks shared by the backbone and branches."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import (
    Tensor,
    affine_norm,
    conv2d,
    dropout,
    gelu,
    layer_norm,
    trunc_normal,
)

__all__ = ["Module", "Linear", "LayerNorm", "AffineNorm", "Conv2d", "Dropout", "MLP"]


class Module:
    """Minimal container: walks its attributes to find parameters and
    submodules, in insertion order so parameter names are stable."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self) -> "Module":
        for m in self.modules():
            m.training = True
        return self

    def eval(self) -> "Module":
        for m in self.modules():
            m.training = False
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            t.data[...] = state[name]


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.w = Tensor(trunc_normal(rng, (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-12):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, axis=-1, eps=self.eps)


class AffineNorm(Module):
    """Learned per-channel scale and shift, no statistics."""

    def __init__(self, dim: int):
        self.alpha = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return affine_norm(x, self.alpha, self.beta)


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        kernel: int = 3,
        stride: int = 1,
        padding: int = 0,
    ):
        self.w = Tensor(trunc_normal(rng, (kernel, kernel, c_in, c_out)), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Dropout(Module):
    """Holds the rate; the rng comes from the owning model at call time."""

    def __init__(self, rate: float):
        self.rate = rate

    def __call__(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        return dropout(x, self.rate, self.training, rng)


class MLP(Module):
    """Two dense layers around a GELU, the transformer feed-forward block."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, drop: float):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_in)
        self.drop = Dropout(drop)

    def __call__(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        h = self.drop(gelu(self.fc1(x)), rng)
        return self.drop(self.fc2(h), rng)
