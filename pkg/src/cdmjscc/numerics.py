"""Reverse-mode autodiff on numpy arrays, the layer vocabulary, Adam and seeded RNG.

Everything trainable in the package is built from :class:`Tensor` operations
defined here.  Arrays are NCHW for images.  The working precision is a
process-wide switch (``set_precision``): 64-bit for gradient checks, 32-bit for
training.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


def set_precision(bits: int) -> None:
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(bits: int):
    old = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_DTYPE"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


# ---------------------------------------------------------------------------
# Tensor and the backward engine
# ---------------------------------------------------------------------------


class Tensor:
    """An n-dimensional real array with an optional gradient record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor, params: Iterable["Parameter"] = ()) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Parameters listed in ``params`` that the graph does not reach receive a
    zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss was not produced by recorded operations")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for p in params:
        if p.value.grad is None:
            p.value.grad = np.zeros_like(p.value.data)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, p: float) -> Tensor:
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def log2(a: Tensor) -> Tensor:
    return _result(np.log2(a.data), (a,), lambda g: (g / (a.data * np.log(2.0)),))


def absolute(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data).astype(a.data.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * special.expit(a.data),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    return _result(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


def normal_cdf(a: Tensor) -> Tensor:
    """Standard normal CDF, elementwise."""
    x = a.data
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _result(special.ndtr(x), (a,), lambda g: (g * pdf,))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def round_ste(a: Tensor) -> Tensor:
    """Round half to even; the gradient passes straight through."""
    return _result(np.round(a.data), (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b`` with ``w`` shaped (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input last dim {x.shape[-1]} != weight rows {w.shape[0]}")
    xd, wd = x.data, w.data

    def bw(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    out = _result(xd @ wd, (x, w), bw)
    return out if b is None else add(out, b)


def conv3x3(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1; ``w`` shaped (Cout, Cin, 3, 3).

    Output spatial size is ``floor((H - 1) / stride) + 1``, i.e. H for stride 1
    and H // 2 (rounding down) for stride 2 on even sizes.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv3x3 expects NCHW input, got rank {x.ndim}")
    B, C, H, W = x.shape
    cout, cin = w.shape[:2]
    if C != cin:
        raise ShapeError(f"conv3x3: input channels {C} != weight in-channels {cin}")
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, C, 9, Ho, Wo), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, 3 * i + j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = cols.reshape(B, C * 9, Ho * Wo)
    wmat = w.data.reshape(cout, C * 9)
    out = np.matmul(wmat, cols).reshape(B, cout, Ho, Wo)

    def bw(g):
        gf = g.reshape(B, cout, Ho * Wo)
        gw = np.einsum("bop,bkp->ok", gf, cols, optimize=True).reshape(w.shape)
        dcols = np.matmul(wmat.T, gf).reshape(B, C, 9, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, 3 * i + j]
        return gxp[:, :, 1:-1, 1:-1], gw

    res = _result(out, (x, w), bw)
    return res if b is None else add(res, b.reshape(1, cout, 1, 1))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    B, C, H, W = x.shape
    if C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible into {groups} groups")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(B, C, H, W)
    out = xhat * gamma.data.reshape(1, C, 1, 1) + beta.data.reshape(1, C, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx_hat = (g * gamma.data.reshape(1, C, 1, 1)).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        gx = inv * (gx_hat - gx_hat.mean(axis=2, keepdims=True)
                    - xh * (gx_hat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(B, C, H, W), ggamma, gbeta

    return _result(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# Parameters and layer objects
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Parameter:
    name: str
    value: Tensor
    moment1: np.ndarray = field(default=None, repr=False)
    moment2: np.ndarray = field(default=None, repr=False)
    step_count: int = 0

    def __post_init__(self):
        self.value.requires_grad = True
        if self.moment1 is None:
            self.moment1 = np.zeros_like(self.value.data)
        if self.moment2 is None:
            self.moment2 = np.zeros_like(self.value.data)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.value.grad = None

    def cast(self):
        """Convert value and moments to the current working precision."""
        self.value.data = self.value.data.astype(_DTYPE)
        self.moment1 = self.moment1.astype(_DTYPE)
        self.moment2 = self.moment2.astype(_DTYPE)


class Module:
    """Container that discovers Parameters and sub-Modules on its attributes."""

    def parameters(self) -> list[Parameter]:
        found: list[Parameter] = []
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Parameter):
                    found.append(item)
                elif isinstance(item, Module):
                    found.extend(item.parameters())
        return found

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}


def _he_init(rng: "RngStream", shape, fan_in: int) -> np.ndarray:
    return rng.gauss(shape) * np.sqrt(2.0 / fan_in)


class Dense(Module):
    def __init__(self, name: str, n_in: int, n_out: int, rng: "RngStream"):
        self.w = Parameter(f"{name}.w", Tensor(_he_init(rng, (n_in, n_out), n_in)))
        self.b = Parameter(f"{name}.b", Tensor(np.zeros(n_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.w.value, self.b.value)


class Conv3x3(Module):
    def __init__(self, name: str, c_in: int, c_out: int, rng: "RngStream", stride: int = 1):
        self.stride = stride
        self.w = Parameter(f"{name}.w", Tensor(_he_init(rng, (c_out, c_in, 3, 3), 9 * c_in)))
        self.b = Parameter(f"{name}.b", Tensor(np.zeros(c_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return conv3x3(x, self.w.value, self.b.value, self.stride)


class UpConv(Conv3x3):
    """Nearest 2x upsample followed by a stride-1 3x3 convolution."""

    def __call__(self, x: Tensor) -> Tensor:
        return conv3x3(upsample2x(x), self.w.value, self.b.value, 1)


class GroupNorm(Module):
    def __init__(self, name: str, channels: int, groups: int = 8):
        self.groups = min(groups, channels)
        self.gamma = Parameter(f"{name}.gamma", Tensor(np.ones(channels)))
        self.beta = Parameter(f"{name}.beta", Tensor(np.zeros(channels)))

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.gamma.value, self.beta.value, self.groups)


LAYER_KINDS = ("dense", "conv3x3-stride1", "conv3x3-stride2", "upsample2x-conv",
               "relu", "group-norm")


def layer_forward(kind: str, params: Sequence[Parameter], x: Tensor, groups: int = 8) -> Tensor:
    """Apply one layer of the fixed vocabulary with explicit parameters.

    ``params`` is (weight, bias) for dense/conv kinds, (gamma, beta) for
    group-norm and empty for relu.
    """
    vals = [p.value for p in params]
    if kind == "dense":
        return dense(x, *vals)
    if kind == "conv3x3-stride1":
        return conv3x3(x, *vals, stride=1)
    if kind == "conv3x3-stride2":
        return conv3x3(x, *vals, stride=2)
    if kind == "upsample2x-conv":
        return conv3x3(upsample2x(x), *vals, stride=1)
    if kind == "relu":
        return relu(x)
    if kind == "group-norm":
        return group_norm(x, vals[0], vals[1], min(groups, x.shape[1]))
    raise ValueError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def adam_step(params: Iterable[Parameter], lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; gradients are cleared afterwards."""
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("adam betas must lie in [0, 1)")
    params = list(params)
    for p in params:
        g = p.value.grad
        if g is None:
            raise ValueError(f"parameter {p.name} has no gradient")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"parameter {p.name} has a non-finite gradient")
    for p in params:
        g = p.value.grad
        p.step_count += 1
        p.moment1 = beta1 * p.moment1 + (1 - beta1) * g
        p.moment2 = beta2 * p.moment2 + (1 - beta2) * g * g
        m_hat = p.moment1 / (1 - beta1 ** p.step_count)
        v_hat = p.moment2 / (1 - beta2 ** p.step_count)
        p.value.data = (p.value.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.data.dtype)
        p.value.grad = None


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


class RngStream:
    """Counter-based random stream on Philox.

    The pair (seed, stream) keys the generator; ``counter`` is the Philox block
    counter where the next draw starts.  Each draw consumes whole blocks, so
    the sequence depends only on (seed, stream, counter).
    """

    def __init__(self, seed: int, counter: int = 0, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def _generator(self):
        bitgen = np.random.Philox(key=[self.seed, self.stream], counter=[self.counter, 0, 0, 0])
        return np.random.Generator(bitgen), bitgen

    def _advance(self, bitgen) -> None:
        state = bitgen.state["state"]["counter"]
        self.counter = int(state[0]) + 1

    def gauss(self, shape) -> np.ndarray:
        gen, bitgen = self._generator()
        out = gen.standard_normal(shape)
        self._advance(bitgen)
        return out.astype(_DTYPE)

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        if not lo < hi:
            raise ValueError("uniform draw needs lo < hi")
        gen, bitgen = self._generator()
        out = gen.uniform(lo, hi, shape)
        self._advance(bitgen)
        return out.astype(_DTYPE)

    def integers(self, lo: int, hi: int, size=None) -> np.ndarray:
        gen, bitgen = self._generator()
        out = gen.integers(lo, hi, size=size)
        self._advance(bitgen)
        return out

    def permutation(self, n: int) -> np.ndarray:
        gen, bitgen = self._generator()
        out = gen.permutation(n)
        self._advance(bitgen)
        return out

    def substream(self, index: int) -> "RngStream":
        """Independent stream derived from (seed, stream, index)."""
        mixed = (self.stream * 0x9E3779B97F4A7C15 + index + 1) & 0xFFFFFFFFFFFFFFFF
        return RngStream(self.seed, 0, mixed)


def gauss_draw(rng: RngStream, shape) -> Tensor:
    return Tensor(rng.gauss(shape))


def unif_draw(rng: RngStream, shape, lo: float, hi: float) -> Tensor:
    return Tensor(rng.uniform(shape, lo, hi))
