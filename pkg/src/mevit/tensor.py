"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation below records enough information to replay its backward
rule on a Tape. Replay order is the reverse of a deterministic topological
sort, so two runs over the same graph produce bit-identical gradients.
Double precision is used throughout; there is no GPU or mixed-precision
path.

Thread-safety: a graph and its tensors belong to one training session.
Tensors that do not require gradients are immutable after construction
and may be shared read-only across threads.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatchError",
    "KernelTooLargeError",
    "no_grad",
    "is_grad_enabled",
    "make_rng",
    "trunc_normal",
    "matmul",
    "add",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "erf",
    "gelu",
    "softmax",
    "layer_norm",
    "affine_norm",
    "reshape",
    "swapaxes",
    "broadcast_to",
    "concat",
    "tsum",
    "tmean",
    "global_avg_pool",
    "conv2d",
    "maxpool2d",
    "dropout",
    "cross_entropy",
    "l1_loss",
]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible."""


class KernelTooLargeError(ValueError):
    """Raised when a conv kernel or pooling window exceeds its (padded) input."""


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / caching)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator so runs replay bit-exactly per seed."""
    return np.random.Generator(np.random.Philox(seed))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) with samples beyond bound*std redrawn."""
    out = rng.normal(0.0, std, size=shape)
    limit = bound * std
    while True:
        bad = np.abs(out) > limit
        if not bad.any():
            return out
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))


class Tensor:
    """N-dimensional float64 array, optionally tracked for differentiation.

    ``grad`` accumulates across backward passes until cleared; after
    ``backward()`` on a scalar loss, the grad of every reachable leaf holds
    the partial derivative of that loss.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Reverse pass from a scalar; accumulates into .grad of ancestors."""
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        Tape(self).backward(self)

    # ---- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Tape:
    """Topologically ordered record of the ops reachable from a root.

    Node order is a deterministic post-order DFS over parent links, so every
    operation's inputs precede it; ``backward`` replays the recorded rules in
    reverse. Identical graphs replay to bit-identical gradients.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.nodes = order

    def backward(self, root: Tensor) -> None:
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---- arithmetic ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product with batched leading dims; dC rules dA = dC.Bt, dB = At.dC."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} x {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # batched sequence x weight: one flat GEMM instead of many small ones
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        data = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a2.T @ g2
            return ga, gb

        return _make(data, (a, b), backward)

    data = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), backward)


# ---- elementwise functions ----------------------------------------------


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * 0.5 / data,))


def erf(a) -> Tensor:
    a = _wrap(a)
    data = _erf(a.data)
    coeff = 2.0 / math.sqrt(math.pi)

    def backward(g):
        return (g * coeff * np.exp(-a.data * a.data),)

    return _make(data, (a,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x), in its erf form."""
    a = _wrap(a)
    cdf = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        return (g * (cdf + a.data * pdf),)

    return _make(data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; slices along ``axis`` sum to one."""
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return ((g - inner) * data,)

    return _make(data, (a,), backward)


# ---- shape manipulation --------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = _wrap(a)
    data = np.swapaxes(a.data, axis1, axis2)
    return _make(data, (a,), lambda g: (np.swapaxes(g, axis1, axis2),))


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape).copy()
    return _make(data, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, ts, backward)


def getitem(a, idx) -> Tensor:
    """Basic (int/slice) indexing; backward scatters grad back into place."""
    a = _wrap(a)
    data = a.data[idx]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _make(data, (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return _make(np.asarray(data), (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    if isinstance(axis, tuple):
        out = a
        for ax in sorted(axis, reverse=True):
            out = tsum(out, axis=ax, keepdims=keepdims)
        return mul(out, 1.0 / n)
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def global_avg_pool(a, axis: int = -2) -> Tensor:
    """Mean over the token (or spatial) axis; channels preserved."""
    a = _wrap(a)
    if a.shape[axis] == 0:
        raise ValueError("global_avg_pool: empty pooling axis")
    return tmean(a, axis=axis)


# ---- normalization --------------------------------------------------------


def layer_norm(x, gamma, beta, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Zero-mean unit-variance along ``axis`` (eps-regularized), then scale/shift."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    ax = axis if axis >= 0 else x.ndim + axis
    extent = x.shape[ax]
    if gamma.size != extent or beta.size != extent:
        raise ShapeMismatchError(
            f"layer_norm: gamma/beta sizes {gamma.size}/{beta.size} do not match axis extent {extent}"
        )
    mu = tmean(x, axis=ax, keepdims=True)
    centered = x - mu
    var = tmean(mul(centered, centered), axis=ax, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    shape = [1] * x.ndim
    shape[ax] = extent
    g = reshape(gamma, shape)
    b = reshape(beta, shape)
    return add(mul(mul(centered, inv), g), b)


def affine_norm(x, alpha, beta) -> Tensor:
    """Per-channel x*alpha + beta on the last axis; no statistics computed."""
    x, alpha, beta = _wrap(x), _wrap(alpha), _wrap(beta)
    extent = x.shape[-1]
    if alpha.size != extent or beta.size != extent:
        raise ShapeMismatchError(
            f"affine_norm: alpha/beta sizes {alpha.size}/{beta.size} do not match channel extent {extent}"
        )
    return add(mul(x, alpha), beta)


# ---- convolution and pooling ----------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation over NHWC input with (kh, kw, c_in, c_out) kernels."""
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects NHWC input and (kh,kw,cin,cout) kernels, got {x.shape} and {weight.shape}"
        )
    bsz, h, w, c_in = x.shape
    kh, kw, wc_in, c_out = weight.shape
    if wc_in != c_in:
        raise ShapeMismatchError(f"conv2d: input channels {c_in} != kernel channels {wc_in}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise KernelTooLargeError(
            f"conv2d: kernel ({kh}x{kw}) larger than padded input ({h + 2 * ph}x{w + 2 * pw})"
        )
    h_out = (h + 2 * ph - kh) // sh + 1
    w_out = (w + 2 * pw - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data

    out = np.zeros((bsz, h_out, w_out, c_out))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + (h_out - 1) * sh + 1 : sh, j : j + (w_out - 1) * sw + 1 : sw, :]
            out += (patch.reshape(-1, c_in) @ weight.data[i, j]).reshape(bsz, h_out, w_out, c_out)
    parents = [x, weight]
    if bias is not None:
        bias = _wrap(bias)
        out += bias.data
        parents.append(bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        g_flat = g.reshape(-1, c_out)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + (h_out - 1) * sh + 1, sh)
                cols = slice(j, j + (w_out - 1) * sw + 1, sw)
                patch = xp[:, rows, cols, :]
                gw[i, j] = patch.reshape(-1, c_in).T @ g_flat
                gxp[:, rows, cols, :] += (g_flat @ weight.data[i, j].T).reshape(bsz, h_out, w_out, c_in)
        gx = gxp[:, ph : ph + h, pw : pw + w, :] if (ph or pw) else gxp
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 1, 2))
        return gx, gw

    return _make(out, parents, backward)


def maxpool2d(x, window=2, stride=None) -> Tensor:
    """Windowed maxima; backward routes grad to the argmax, first index
    in row-major window order on ties."""
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeMismatchError(f"maxpool2d expects NHWC input, got {x.shape}")
    bsz, h, w, c = x.shape
    wh, ww = _pair(window)
    sh, sw = _pair(stride) if stride is not None else (wh, ww)
    if wh > h or ww > w:
        raise KernelTooLargeError(f"maxpool2d: window ({wh}x{ww}) exceeds input ({h}x{w})")
    h_out = (h - wh) // sh + 1
    w_out = (w - ww) // sw + 1

    out = np.zeros((bsz, h_out, w_out, c))
    argmax = np.zeros((bsz, h_out, w_out, c), dtype=np.int64)
    for oi in range(h_out):
        for oj in range(w_out):
            patch = x.data[:, oi * sh : oi * sh + wh, oj * sw : oj * sw + ww, :]
            flat = patch.reshape(bsz, wh * ww, c)
            idx = flat.argmax(axis=1)
            out[:, oi, oj, :] = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]
            argmax[:, oi, oj, :] = idx

    def backward(g):
        gx = np.zeros_like(x.data)
        b_idx, c_idx = np.meshgrid(np.arange(bsz), np.arange(c), indexing="ij")
        for oi in range(h_out):
            for oj in range(w_out):
                idx = argmax[:, oi, oj, :]
                rows = oi * sh + idx // ww
                cols = oj * sw + idx % ww
                np.add.at(gx, (b_idx, rows, cols, c_idx), g[:, oi, oj, :])
        return (gx,)

    return _make(out, (x,), backward)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability rate, survivors scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _wrap(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# ---- losses ----------------------------------------------------------------


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    logits = _wrap(logits)
    if logits.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    bsz, k = logits.shape
    if y.shape[0] != bsz:
        raise ShapeMismatchError(f"cross_entropy: {bsz} logit rows vs {y.shape[0]} labels")
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = float((lse - z[np.arange(bsz), y]).mean())

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(bsz), y] -= 1.0
        return (g * p / bsz,)

    return _make(np.asarray(loss), (logits,), backward)


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error; subgradient at pred == target taken as zero."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    loss = float(np.abs(diff).mean())
    n = diff.size

    def backward(g):
        s = np.sign(diff) / n
        return (g * s, -g * s)

    return _make(np.asarray(loss), (pred, target), backward)
