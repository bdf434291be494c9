"""Dense tensors with tape-free reverse-mode automatic differentiation.

Every operation that involves a tensor requiring gradients records its
parents and a closure computing the vector-Jacobian product.  Each node
carries a creation sequence number, so ``Tensor.backward`` can replay the
reachable part of the graph in exact reverse order of the forward pass.

Only bias addition broadcasts; every other binary operation requires equal
shapes.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateBatchError, DimensionError, LabelError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_sequence = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """An n-dimensional float32/float64 array that can take part in a compute graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_sequence)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        ``self`` must hold exactly one element.  Leaves accumulate, so two
        calls without ``zero_grad`` double the stored gradients.
        """
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("tensor does not depend on any differentiable input")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        pending = {id(self): np.ones_like(self.data)}
        for node in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


class Parameter(Tensor):
    """A leaf tensor owned by a layer.

    Frozen parameters (``trainable=False``) still receive gradients so that
    feature gradients can flow through a frozen network; optimizers skip them.
    """

    def __init__(self, data, trainable: bool = True, dtype=None, name: str = ""):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.trainable = trainable
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name or '?'}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# elementwise and reductions
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.dtype.type(factor), (x,), lambda g: (g * x.dtype.type(factor),))


def tensor_sum(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.full_like(x.data, g),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def masked(x, keep: np.ndarray) -> Tensor:
    """Zero-fill elements where the boolean ``keep`` is False; the mask is a constant."""
    x = as_tensor(x)
    if keep.shape != x.shape:
        raise DimensionError(f"masked: mask {keep.shape} does not match {x.shape}")
    zero = x.dtype.type(0)
    return _result(np.where(keep, x.data, zero), (x,), lambda g: (np.where(keep, g, zero),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    return _result(np.where(active, x.data, x.dtype.type(0)), (x,),
                   lambda g: (np.where(active, g, g.dtype.type(0)),))


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def linear(x, weight, bias) -> Tensor:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _result(out, (x, weight, bias), backward)


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an OIkk kernel."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {c_in}")
    if kh != kw:
        raise DimensionError("conv2d: only square kernels are supported")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    k = kh
    span_h, span_w = h + 2 * padding - k, w + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(f"conv2d: {h}x{w} input, kernel {k}, stride {stride}, "
                             f"padding {padding} gives non-integer output size")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # channels-last shifted matmuls: one (C -> C_out) product per kernel offset
    xl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    wk = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))
    offsets = [(i, j, (slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
                       slice(j, j + stride * (wo - 1) + 1, stride), slice(None)))
               for i in range(k) for j in range(k)]
    out = np.zeros((n, ho, wo, c_out), dtype=x.dtype)
    for i, j, window in offsets:
        out += xl[window] @ wk[i, j]
    out += bias.data
    out = out.transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c_out)
        wkt = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
        dxl = np.zeros(xl.shape, dtype=g.dtype)
        dwk = np.empty(wk.shape, dtype=g.dtype)
        for i, j, window in offsets:
            dxl[window] += (g2 @ wkt[i, j]).reshape(n, ho, wo, c)
            dwk[i, j] = np.ascontiguousarray(xl[window]).reshape(-1, c).T @ g2
        dx = dxl.transpose(0, 3, 1, 2)
        if padding:
            dx = dx[:, :, padding:padding + h, padding:padding + w]
        return (np.ascontiguousarray(dx), np.ascontiguousarray(dwk.transpose(3, 2, 0, 1)),
                g2.sum(axis=0))

    return _result(np.ascontiguousarray(out), (x, weight, bias), backward)


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization of an NCHW batch.

    In training mode the running statistics are updated in place with an
    exponential moving average (unbiased variance), and gradients flow
    through the batch statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise DimensionError(f"batchnorm2d: per-channel parameters do not match {c} channels")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    dt = x.dtype.type
    gshape = (1, c, 1, 1)

    if training:
        if count < 2:
            raise DegenerateBatchError("batchnorm2d: need at least two values per channel in train mode")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(gshape)
        var = (centered * centered).mean(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var * (count / (count - 1))).astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        centered = x.data - mean.reshape(gshape)

    inv_std = (dt(1) / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = centered * inv_std.reshape(gshape)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(gshape)
        if training:
            dx = (inv_std.reshape(gshape) / dt(count)) * (
                dt(count) * dxhat
                - dxhat.sum(axis=axes).reshape(gshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(gshape))
        else:
            dx = dxhat * inv_std.reshape(gshape)
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward)


def maxpool2d(x, k: int = 2, stride: int = 2) -> Tensor:
    """Windowed maximum; gradient goes to the first maximal element of each window."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % stride or w % stride or h < k or w < k:
        raise DimensionError(f"maxpool2d: spatial size {h}x{w} incompatible with k={k}, stride={stride}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, :, i:i + stride * (ho - 1) + 1:stride,
               j:j + stride * (wo - 1) + 1:stride] += np.where(arg == idx, g, g.dtype.type(0))
        return (dx,)

    return _result(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest: expected NCHW input, got {x.shape}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), backward)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    n, num_classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    dt = logits.dtype.type
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    rows = np.arange(n)
    loss = -log_probs[rows, labels].sum() / dt(n)

    def backward(g):
        grad = exp / total
        grad[rows, labels] -= dt(1)
        return (grad * (g / dt(n)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def mse_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    dt = pred.dtype.type
    loss = (diff * diff).sum() / dt(diff.size)
    return _result(np.asarray(loss, dtype=pred.dtype), (pred,),
                   lambda g: (diff * (dt(2) * g / dt(diff.size)),))
