"""Dense tensors with reverse-mode automatic differentiation.

Every array in the network lives inside a :class:`Tensor`.  Operations record
their parents and a backward closure; :meth:`Tensor.backward` walks the
recorded graph in reverse topological order (the :class:`Tape`) and
accumulates gradients into leaves that have ``requires_grad`` set.

The element type is selected globally with :func:`set_default_dtype` (64-bit
by default, which the gradient checks rely on; training switches to 32-bit).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_state = {"dtype": np.dtype(np.float64), "grad_enabled": True}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """n-dimensional float array participating in the differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (),
                 _backward: BackwardFn | None = None, _op: str = "") -> None:
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != get_default_dtype():
            arr = arr.astype(get_default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'!r})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``grad`` on every reachable leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = Tape.from_output(self)
        tape.run(self, np.asarray(grad, dtype=self.data.dtype))

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Tape:
    """Topologically ordered record of the operations leading to an output."""

    def __init__(self, nodes: list[Tensor]) -> None:
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def run(self, out: Tensor, grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(out): grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward: BackwardFn, op: str) -> Tensor:
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return _result(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _result(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), backward, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [expand_dims(t, axis) for t in tensors]
    return concat(expanded, axis=axis)


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = list(a.shape)
    axis = axis % (a.ndim + 1)
    shape.insert(axis, 1)
    return reshape(a, shape)


def pad(a, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    a = as_tensor(a)
    widths = tuple(tuple(w) for w in widths)
    out = np.pad(a.data, widths)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _result(out, (a,), lambda g: (g[crop],), "pad")


def flip(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if not axes:
        return a
    return _result(np.flip(a.data, axes), (a,), lambda g: (np.flip(g, axes),), "flip")


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(out, (a,), backward, "cumsum")


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)
    return _result(np.array(out), (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., M, K] @ b[..., K, N]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# softmax family and normalization
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def normalize(a, axes: Sequence[int], eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-(population)-variance standardization over ``axes``."""
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    n = math.prod(a.shape[ax] for ax in axes)
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).sum(axis=axes, keepdims=True) / n
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, (a,), backward, "normalize")


def layer_norm(x, weight=None, bias=None, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize along ``axis`` then apply the optional affine parameters."""
    x = as_tensor(x)
    axis = axis % x.ndim
    out = normalize(x, (axis,), eps)
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    if weight is not None:
        out = out * reshape(weight, shape)
    if bias is not None:
        out = out + reshape(bias, shape)
    return out


def instance_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes of (B, C, ...)."""
    x = as_tensor(x)
    out = normalize(x, tuple(range(2, x.ndim)), eps)
    shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if weight is not None:
        out = out * reshape(weight, shape)
    if bias is not None:
        out = out + reshape(bias, shape)
    return out


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def _window(offset: int, count: int, stride: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def _fold(xp: np.ndarray, kernel, stride, out_ext) -> np.ndarray:
    """(Ci, Hp, Wp, Dp) -> (kw*kd*Ci, Hp, Wo, Do): the two inner kernel axes moved into channels."""
    ci, hp = xp.shape[:2]
    _, kw, kd = kernel
    _, wo, do = out_ext
    cols = np.empty((kw, kd, ci, hp, wo, do), dtype=xp.dtype)
    for j in range(kw):
        for k in range(kd):
            cols[j, k] = xp[:, :, _window(j, wo, stride[1]), _window(k, do, stride[2])]
    return cols.reshape(kw * kd * ci, hp, wo, do)


def _rows(cols: np.ndarray, i: int, ho: int, sh: int) -> np.ndarray:
    return cols[:, _window(i, ho, sh)].reshape(cols.shape[0], -1)


def _kernel_rows(w: np.ndarray) -> np.ndarray:
    # (Co, Ci, kh, kw, kd) -> (kh, Co, kw*kd*Ci) matching the _fold channel order
    co, ci, kh, kw, kd = w.shape
    return w.transpose(2, 0, 3, 4, 1).reshape(kh, co, kw * kd * ci)


def _pad_sample(x: np.ndarray, padding) -> np.ndarray:
    return np.pad(x, ((0, 0),) + tuple((p, p) for p in padding))


def _conv_forward(x: np.ndarray, w: np.ndarray, stride, padding, out_ext, keep_cols: bool):
    """Returns the (B, Co, Ho, Wo, Do) output and, optionally, the per-sample folded inputs."""
    kernel = w.shape[2:]
    wr = _kernel_rows(w)
    out = np.empty((x.shape[0], w.shape[0]) + tuple(out_ext), dtype=x.dtype)
    saved = []
    for b in range(x.shape[0]):
        cols = _fold(_pad_sample(x[b], padding), kernel, stride, out_ext)
        acc = None
        for i in range(kernel[0]):
            r = wr[i] @ _rows(cols, i, out_ext[0], stride[0])
            acc = r if acc is None else acc + r
        out[b] = acc.reshape((w.shape[0],) + tuple(out_ext))
        if keep_cols:
            saved.append(cols)
    return out, saved


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride, padding, in_ext) -> np.ndarray:
    """Gradient of conv3d w.r.t. its input (equivalently, the transposed convolution of g)."""
    co, ci, kh, kw, kd = w.shape
    ho, wo, do = g.shape[2:]
    padded = tuple(n + 2 * p for n, p in zip(in_ext, padding))
    wr = _kernel_rows(w)
    gx = np.empty((g.shape[0], ci) + tuple(in_ext), dtype=g.dtype)
    crop = (slice(None),) + tuple(slice(p, p + n) for p, n in zip(padding, in_ext))
    for b in range(g.shape[0]):
        gb = g[b].reshape(co, -1)
        gcols = np.zeros((kw * kd * ci, padded[0], wo, do), dtype=g.dtype)
        for i in range(kh):
            gcols[:, _window(i, ho, stride[0])] += (wr[i].T @ gb).reshape(-1, ho, wo, do)
        gcols = gcols.reshape(kw, kd, ci, padded[0], wo, do)
        gxp = np.zeros((ci,) + padded, dtype=g.dtype)
        for j in range(kw):
            for k in range(kd):
                gxp[:, :, _window(j, wo, stride[1]), _window(k, do, stride[2])] += gcols[j, k]
        gx[b] = gxp[crop]
    return gx


def _conv_weight_grad(g: np.ndarray, cols: list, w_shape, stride) -> np.ndarray:
    co, ci, kh, kw, kd = w_shape
    ho = g.shape[2]
    gwr = np.zeros((kh, co, kw * kd * ci), dtype=g.dtype)
    for b in range(g.shape[0]):
        gb = g[b].reshape(co, -1)
        for i in range(kh):
            gwr[i] += gb @ _rows(cols[b], i, ho, stride[0]).T
    return gwr.reshape(kh, co, kw, kd, ci).transpose(1, 4, 0, 2, 3)


def conv3d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of x (B, Cin, H, W, D) with weight (Cout, Cin, kh, kw, kd)."""
    x, weight = as_tensor(x), as_tensor(weight)
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and kernel, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    if min(stride) < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    kernel = weight.shape[2:]
    padded = [n + 2 * p for n, p in zip(x.shape[2:], padding)]
    if any(k > n for k, n in zip(kernel, padded)):
        raise ShapeError(f"kernel {tuple(kernel)} larger than padded input {tuple(padded)}")
    out_ext = tuple((n - k) // s + 1 for n, k, s in zip(padded, kernel, stride))
    track = is_grad_enabled() and weight.requires_grad
    out, cols = _conv_forward(x.data, weight.data, stride, padding, out_ext, keep_cols=track)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(1, -1, 1, 1, 1)
        parents = parents + (bias,)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = _conv_input_grad(g, weight.data, stride, padding, x.shape[2:]) if x.requires_grad else None
        gw = _conv_weight_grad(g, cols, weight.shape, stride) if weight.requires_grad else None
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3, 4)),)
        return grads

    return _result(out, parents, backward, "conv3d")


def conv_transpose3d(x, weight, bias=None, stride=1, padding=0, output_padding=0) -> Tensor:
    """Adjoint of :func:`conv3d` with respect to its input.

    ``weight`` has shape (Cin, Cout, kh, kw, kd) where Cin is the channel count
    of ``x`` (the conv3d output side).  Output extents are
    ``(n - 1) * stride - 2 * padding + k + output_padding``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    stride, padding, output_padding = _triple(stride), _triple(padding), _triple(output_padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv_transpose3d expects 5-D tensors, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose3d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    if any(op >= s for op, s in zip(output_padding, stride)):
        raise ValueError("output_padding must be smaller than stride")
    kernel = weight.shape[2:]
    out_ext = tuple((n - 1) * s - 2 * p + k + op for n, s, p, k, op
                    in zip(x.shape[2:], stride, padding, kernel, output_padding))
    if min(out_ext) < 1:
        raise ShapeError(f"conv_transpose3d produces empty output for input {x.shape}")
    xd = np.ascontiguousarray(x.data)
    out = _conv_input_grad(xd, weight.data, stride, padding, out_ext)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(1, -1, 1, 1, 1)
        parents = parents + (bias,)

    def backward(g):
        need_w = weight.requires_grad
        gx, cols = _conv_forward(g, weight.data, stride, padding, x.shape[2:], keep_cols=need_w)
        gw = _conv_weight_grad(xd, cols, weight.shape, stride) if need_w else None
        grads = (gx if x.requires_grad else None, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3, 4)),)
        return grads

    return _result(out, parents, backward, "conv_transpose3d")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradcheckReport:
    def __init__(self, max_rel_error: float, tol: float, per_input: list[float]) -> None:
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.per_input = per_input

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __bool__(self) -> bool:
        return self.passed

    def __repr__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"GradcheckReport({verdict}, max_rel_error={self.max_rel_error:.3e}, tol={self.tol:g})"


def gradcheck(f: Callable[..., Tensor], inputs: Tensor | Iterable[Tensor], h: float = 1e-5,
              tol: float = 1e-4, max_entries: int | None = None,
              rng: np.random.Generator | None = None) -> GradcheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` against central differences.

    Relative error per entry is ``|g - g_fd| / max(1, |g|, |g_fd|)``.  With
    ``max_entries`` set, only a random subset of entries per input is probed.
    Functions with kinks (argmax, thresholds) are not differentiable and make
    this check fail by design.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ShapeError(f"gradcheck needs a scalar function, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("gradcheck: f(x) is not finite")
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64)
                for t in inputs]
    rng = rng or np.random.default_rng(0)
    per_input = []
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*inputs).data)
                flat[i] = orig - h
                fm = float(f(*inputs).data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                g = ga.reshape(-1)[i]
                err = abs(g - numeric) / max(1.0, abs(g), abs(numeric))
                worst = max(worst, err)
            per_input.append(worst)
    return GradcheckReport(max(per_input) if per_input else 0.0, tol, per_input)
