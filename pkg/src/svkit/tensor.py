"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the operations the embedding network needs: elementwise
arithmetic with broadcasting, activations, matmul/linear, 2-D convolution,
batch normalization, reductions, and shape movement.  Data is float32 by
default; constructing with float64 runs the whole graph in float64, which
the finite-difference oracles rely on.  Reductions accumulate in float64
regardless of storage dtype.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data, dtype=None):
    if isinstance(data, (np.ndarray, np.generic)):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        return arr
    arr = np.asarray(data, dtype=np.float64 if dtype is None else dtype)
    if dtype is None:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A node in the computation graph.

    Leaf tensors own their data; op results additionally carry the parent
    tensors and a closure computing parent gradients from the output
    gradient.  ``backward()`` walks the tape in reverse topological order
    and accumulates into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn = None

    @classmethod
    def _from_op(cls, data, parents, grad_fn):
        out = cls(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        return out

    # ------------------------------------------------------------------ info
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -------------------------------------------------------------- backward
    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar root, got shape {self.shape}")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._grad_fn is None:
                node.grad = g if node.grad is None else node.grad + g
            if node._grad_fn is None:
                continue
            parent_grads = node._grad_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = pg.astype(p.data.dtype, copy=False)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # ------------------------------------------------------------ arithmetic
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # --------------------------------------------------------------- aliases
    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int)
                       else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast to produce ``grad``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- primitives
def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return Tensor._from_op(out, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return Tensor._from_op(out, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return Tensor._from_op(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return Tensor._from_op(out, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def pow_(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    out = a.data ** e
    return Tensor._from_op(out, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (0.5 / out),))


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data)
    if lo is not None:
        inside = inside * (a.data >= lo)
    if hi is not None:
        inside = inside * (a.data <= hi)
    return Tensor._from_op(out, (a,), lambda g: (g * inside,))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    out = np.where(mask, a.data, b.data)
    return Tensor._from_op(out, (a, b), lambda g: (
        _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)))


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = out.astype(a.dtype)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return Tensor._from_op(out, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[i] for i in axis]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    out = a.data.transpose(axes)
    return Tensor._from_op(out, (a,), lambda g: (g.transpose(inv),))


def take(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return Tensor._from_op(out, (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(tensors), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return Tensor._from_op(out, (a, b), lambda g: (
        g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g))


# --------------------------------------------------------------- activations
def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return Tensor._from_op(out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    return Tensor._from_op(
        out, (a,), lambda g: (g * (sig + a.data * sig * (1.0 - sig)),))


_ACTIVATIONS = {"relu": relu, "silu": silu, "tanh": tanh, "sigmoid": sigmoid}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None


# -------------------------------------------------------------------- linear
def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: x[B,N] @ weight[M,N]^T (+ bias[M])."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return out


# --------------------------------------------------------------- convolution
@dataclass
class ConvParams:
    """Kernel/bias plus geometry for one 2-D convolution."""
    kernel: Tensor                      # (out_ch, in_ch, kH, kW)
    bias: Optional[Tensor] = None       # (out_ch,)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)

    def __post_init__(self):
        if self.stride[0] < 1 or self.stride[1] < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding[0] < 0 or self.padding[1] < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * sh, s3 * sw))
    return view.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, x_shape, kh, kw, sh, sw, ph, pw, ho, wo):
    b, c, h, w = x_shape
    xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for u in range(kh):
        for v in range(kw):
            xp[:, :, u:u + sh * ho:sh, v:v + sw * wo:sw] += cols[:, :, u, v]
    if ph or pw:
        return xp[:, :, ph:h + ph, pw:w + pw]
    return xp


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation of x[B,Cin,H,W] with params.kernel, NCHW layout."""
    kernel, bias = params.kernel, params.bias
    sh, sw = params.stride
    ph, pw = params.padding
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {x.shape}, kernel {kernel.shape}, "
            f"stride {params.stride}, padding {params.padding}")

    onebyone = kh == 1 and kw == 1 and ph == 0 and pw == 0
    if onebyone:
        xs = x.data[:, :, ::sh, ::sw] if (sh > 1 or sw > 1) else x.data
        cols = xs.reshape(b, cin, ho * wo)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = (wmat @ cols).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def grad_fn(g):
        gmat = g.reshape(b, cout, ho * wo)
        dw = np.einsum("bol,bcl->oc", gmat, cols, optimize=True)
        dkernel = dw.reshape(kernel.shape)
        dcols = wmat.T @ gmat
        if onebyone:
            if sh > 1 or sw > 1:
                dx = np.zeros_like(x.data)
                dx[:, :, ::sh, ::sw] = dcols.reshape(b, cin, ho, wo)
            else:
                dx = dcols.reshape(x.shape)
        else:
            dx = _col2im(dcols, x.shape, kh, kw, sh, sw, ph, pw, ho, wo)
        dbias = None if bias is None else g.sum(axis=(0, 2, 3))
        return dx, dkernel, dbias

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    if bias is None:
        return Tensor._from_op(out, parents, lambda g: grad_fn(g)[:2])
    return Tensor._from_op(out, parents, grad_fn)


# ----------------------------------------------------------------- batchnorm
@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one BN layer."""
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    training_mode: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel normalization of x[B,C,H,W].

    Training mode normalizes with batch statistics (gradients flow through
    them) and updates the running estimates; eval mode is a pure function
    of the running statistics.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects 4-D input, got {x.shape}")
    c = x.shape[1]
    if state.gamma.shape != (c,):
        raise ShapeError(
            f"batchnorm channel mismatch: input {x.shape} vs gamma {state.gamma.shape}")
    gamma = reshape(state.gamma, (1, c, 1, 1))
    beta = reshape(state.beta, (1, c, 1, 1))
    if state.training_mode:
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        inv = pow_(add(var, Tensor(np.asarray(state.epsilon, dtype=x.dtype))), -0.5)
        xhat = mul(centered, inv)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbias = n / max(n - 1, 1)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean
                              + m * mu.data.reshape(c).astype(state.running_mean.dtype))
        state.running_var = ((1 - m) * state.running_var
                             + m * (var.data.reshape(c) * unbias).astype(
                                 state.running_var.dtype))
    else:
        if not np.all(np.isfinite(state.running_var)):
            raise ValueError("batchnorm running_var contains non-finite values")
        rm = state.running_mean.reshape(1, c, 1, 1)
        rv = state.running_var.reshape(1, c, 1, 1)
        scale = 1.0 / np.sqrt(rv + state.epsilon)
        xhat = mul(sub(x, Tensor(rm.astype(x.dtype))),
                   Tensor(scale.astype(x.dtype)))
    return add(mul(xhat, gamma), beta)
