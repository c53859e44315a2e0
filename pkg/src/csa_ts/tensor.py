"""Dense float tensors with reverse-mode automatic differentiation.

Each forward op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Calling
:func:`backward` on a scalar orders the reachable graph topologically
(:class:`Tape`) and pushes gradients back to the leaves.

Precision defaults to float32; wrap gradient checks in ``precision("float64")``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, EmptyReductionError, NonFiniteError, ShapeError

_default_dtype = np.dtype(np.float32)
_grad_enabled = True


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An n-dimensional float array that can take part in autodiff."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        dtype = np.dtype(dtype) if dtype is not None else _default_dtype
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str):
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=self.data.dtype)

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul_batched(self, self._coerce(other))

    def sum(self, axis=None, keepdims=False):
        return sum_axes(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_axes(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_elem(self)

    def relu(self):
        return relu(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "div")

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return Tensor._from_op(a.data / b.data, (a, b), bw, "div")


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def bw(g):
        return (g * p * x.data ** (p - 1),)

    return Tensor._from_op(x.data**p, (x,), bw, "pow")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g / x.data,), "log")


def abs_elem(x: Tensor) -> Tensor:
    """Elementwise ``|x|``; the backward rule uses ``sign(x)`` (0 at the kink)."""
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


# -- reductions ------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def sum_axes(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(y), (x,), bw, "sum")


def mean_axes(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise EmptyReductionError(f"mean over empty axes {axes} of shape {x.shape}")
    y = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return Tensor._from_op(np.asarray(y, dtype=x.dtype), (x,), bw, "mean")


def reduce_mean_axis(x: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along one axis; the axis is removed from the shape."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    if x.shape[axis] == 0:
        raise EmptyReductionError(f"mean over zero-extent axis {axis} of shape {x.shape}")
    return mean_axes(x, axis)


# -- shape algebra -----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return Tensor._from_op(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return reshape(x, np.expand_dims(x.data, axis).shape)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def repeat(x: Tensor, count: int, axis: int) -> Tensor:
    """Explicit ``count`` copies of each slice along ``axis`` (numpy ``repeat``)."""
    axis %= x.ndim
    n = x.shape[axis]

    def bw(g):
        split = g.shape[:axis] + (n, count) + g.shape[axis + 1 :]
        return (g.reshape(split).sum(axis=axis + 1),)

    return Tensor._from_op(np.repeat(x.data, count, axis=axis), (x,), bw, "repeat")


# -- linear algebra ----------------------------------------------------------------


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two dims; leading dims broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        g = flush_subnormal(g.copy())
        if b.ndim == 2:
            # shared right operand: fold all batch dims into one product
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(g.shape[:-1] + (b.shape[0],))
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return unbroadcast(ga, a.shape), gb

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def same_padding(k: int) -> tuple:
    left = (k - 1) // 2
    return left, k - 1 - left


def conv1d_same(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding.

    ``x`` is ``(N, C_in, T)``, ``kernel`` is ``(C_out, C_in, k)``; the output
    is ``(N, C_out, T)``.  Even ``k`` pads one more zero on the right.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d: expected (N, C_in, T) input, got {x.shape}")
    return conv1d_same_ntc(x.transpose(0, 2, 1), kernel, bias).transpose(0, 2, 1)


def conv1d_same_ntc(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """:func:`conv1d_same` on channels-last data: ``(N, T, C_in) -> (N, T, C_out)``."""
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-d input and kernel, got {x.shape} and {kernel.shape}")
    n, t, c_in = x.shape
    c_out, k_in, k = kernel.shape
    if k_in != c_in:
        raise ShapeError(f"conv1d: input has {c_in} channels, kernel {kernel.shape} expects {k_in}")
    if t < 1 or k < 1:
        raise ShapeError(f"conv1d: empty time axis or kernel ({x.shape}, {kernel.shape})")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {bias.shape} != ({c_out},)")
    left, right = same_padding(k)
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    # tap-major columns: cols[:, j*C_in:(j+1)*C_in] holds the input shifted by j
    cols = np.concatenate([xp[:, j : j + t] for j in range(k)], axis=-1).reshape(n * t, k * c_in)
    w2 = kernel.data.transpose(0, 2, 1).reshape(c_out, k * c_in)
    y = cols @ w2.T
    if bias is not None:
        y += bias.data
    y = y.reshape(n, t, c_out)

    def bw(g):
        g2 = flush_subnormal(g.reshape(n * t, c_out).copy())
        gw = (g2.T @ cols).reshape(c_out, k, c_in).transpose(0, 2, 1)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, t, k, c_in)
            gxp = np.zeros((n, t + k - 1, c_in), dtype=g.dtype)
            for j in range(k):
                gxp[:, j : j + t] += gcols[:, :, j]
            gx = gxp[:, left : left + t]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(y, parents, bw, "conv1d")


# -- normalisers ---------------------------------------------------------------------


def flush_subnormal(a: np.ndarray) -> np.ndarray:
    """Zero out subnormal entries in place.

    Sharp softmaxes underflow into the subnormal range, where BLAS kernels
    run an order of magnitude slower; the values themselves are below the
    dtype's smallest normal number and carry no usable information.
    """
    if a.dtype.kind == "f":
        a[np.abs(a) < np.finfo(a.dtype).tiny] = 0
    return a


def softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = flush_subnormal(e / e.sum(axis=axis, keepdims=True))

    def bw(g):
        return (flush_subnormal(y * (g - (g * y).sum(axis=axis, keepdims=True))),)

    return Tensor._from_op(y, (x,), bw, "softmax")


def log_softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (flush_subnormal(g - np.exp(y) * g.sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), bw, "log_softmax")


# -- backward pass -------------------------------------------------------------------


class Tape:
    """Nodes reachable from a root, in topological order (inputs first)."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, root: Tensor, seed: np.ndarray) -> None:
        grads = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_root(loss).run(loss, np.ones_like(loss.data))


# -- gradient checking ---------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    worst: Optional[tuple] = None
    failures: list = field(default_factory=list)
    n_checked: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failures

    def raise_if_failed(self) -> None:
        if self.failures:
            name, idx, rel = self.failures[0]
            raise AssertionError(
                f"gradient check failed for {name}{list(idx)}: rel err {rel:.3e} > {self.tol:g} "
                f"({len(self.failures)} failing coordinates)"
            )


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor] | dict,
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    The relative error at each coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps round-off on near-zero gradients from dominating.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]
    for name, p in named:
        if p.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 parameters; {name} is {p.dtype}")
        if not np.isfinite(p.data).all():
            raise ContractError(f"grad_check: {name} is not finite")
        p.grad = None
    backward(f())
    report = GradCheckReport(tol=tol)
    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            idx = np.unravel_index(i, p.shape)
            report.n_checked += 1
            if report.worst is None or rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (name, tuple(int(j) for j in idx))
            if rel > tol:
                report.failures.append((name, tuple(int(j) for j in idx), rel))
    return report
