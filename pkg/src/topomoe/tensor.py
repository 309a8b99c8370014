"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (encoders, attention, experts, losses) is expressed
in the operations of this module.  Design points:

* numpy arrays as storage, row-major, float32 by default; a float64 mode
  (``set_default_dtype`` / ``f64_mode``) exists for finite-difference
  gradient checking.
* The compute graph is recorded on the output tensors themselves: each
  non-leaf holds its parents and an adjoint closure.  ``backward`` replays
  the closures in reverse topological order, visiting each recorded
  operation exactly once.
* Gradients accumulate: calling ``backward`` twice without clearing grads
  adds the second pass onto the first.  Clearing is the caller's job
  (``Module.zero_grad`` in practice).
* Broadcasting is deliberately restricted to scalar-with-tensor and a
  trailing-axis bias add; everything else must match shapes exactly, so
  shape bugs fail loudly (ShapeError) instead of silently broadcasting.
* Every forward output is checked for NaN/Inf and raises NumericFault on
  the spot; a non-finite value is never allowed to propagate silently.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ._kernels import conv1d_forward, conv1d_grad_input, conv1d_grad_weight
from .errors import NumericFault, ShapeError, ValidationError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValidationError(f"unsupported tensor dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def f64_mode():
    """Run a block with float64 as the default dtype (gradient checking)."""
    global _DEFAULT_DTYPE
    saved = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64
    try:
        yield
    finally:
        _DEFAULT_DTYPE = saved


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference passes)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def _ensure_finite(op: str, arr: np.ndarray) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericFault(f"{op} produced a non-finite value")


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A grad-less leaf sharing this tensor's values."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; all routed through the op suite below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ShapeError("tensor division only supports scalar divisors")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    _ensure_finite(op, data)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar (size 1).  Each recorded operation's adjoint
    runs exactly once, in reverse topological order.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
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
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# op suite
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        data = a.data + a.data.dtype.type(b)

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g)

        return _result("add", data, (a,), bw)
    b = as_tensor(b)
    if a.shape == b.shape:
        data = a.data + b.data

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)

        return _result("add", data, (a, b), bw)
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        data = a.data + b.data  # trailing-axis bias

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.reshape(-1, b.shape[0]).sum(axis=0))

        return _result("add", data, (a, b), bw)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _result("neg", -a.data, (a,), bw)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    return add(a, neg(as_tensor(b)))


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        scale = a.data.dtype.type(b)
        data = a.data * scale

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g * scale)

        return _result("mul", data, (a,), bw)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _result("mul", data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-d x 2-d, batched x 2-d (linear map), or batched
    x batched with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim == 2:
        data = a.data @ b.data

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                k, n = b.shape
                b.accumulate_grad(a.data.reshape(-1, k).T @ g.reshape(-1, n))

        return _result("matmul", data, (a, b), bw)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"matmul: batch dims must match exactly, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ g)

    return _result("matmul", data, (a, b), bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid (unpadded) 1-d convolution of (N,Cin,T) with (Cout,Cin,K)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: need (N,Cin,T) and (Cout,Cin,K), got {x.shape}, {w.shape}")
    n, c_in, t = x.shape
    c_out, c_in_w, kernel = w.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv1d: channel mismatch, input has {c_in}, weight expects {c_in_w}")
    if kernel > t:
        raise ShapeError(f"conv1d: kernel {kernel} longer than input length {t}")
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >=1, got {stride}")
    xc = np.ascontiguousarray(x.data)
    wc = np.ascontiguousarray(w.data)
    data = conv1d_forward(xc, wc, stride)

    def bw(g):
        gc = np.ascontiguousarray(g)
        if x.requires_grad:
            x.accumulate_grad(conv1d_grad_input(gc, wc, stride, t))
        if w.requires_grad:
            w.accumulate_grad(conv1d_grad_weight(gc, xc, stride, kernel))

    out = _result("conv1d", data, (x, w), bw)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {b.shape} != ({c_out},)")
        data2 = out.data + b.data[:, None]

        def bw2(g):
            if out.requires_grad:
                out.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=(0, 2)))

        return _result("conv1d", data2, (out, b), bw2)
    return out


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    data = np.where(mask, x.data, 0)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _result("relu", data, (x,), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (numerically stabilised)."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            x.accumulate_grad((g - dot) * data)

    return _result("softmax", data, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis; optional per-feature scale and shift."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    d = x.shape[-1]
    if gamma is not None and gamma.shape != (d,):
        raise ShapeError(f"layer_norm: gamma shape {gamma.shape} != ({d},)")
    if beta is not None and beta.shape != (d,):
        raise ShapeError(f"layer_norm: beta shape {beta.shape} != ({d},)")
    data = xhat if gamma is None else xhat * gamma.data
    if beta is not None:
        data = data + beta.data

    def bw(g):
        gx = g if gamma is None else g * gamma.data
        if x.requires_grad:
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gx - m1 - xhat * m2))
        if gamma is not None and gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None and beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0))

    parents = [x] + [t for t in (gamma, beta) if t is not None]
    return _result("layer_norm", data, parents, bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation of (N,C,T) over the (N,T) axes.

    Always uses the statistics of the current batch; no running averages
    are kept (the same statistics mode is used when extracting features).
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"batch_norm: expected (N,C,T), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: scale/shift must be ({c},), got {gamma.shape}, {beta.shape}")
    axes = (0, 2)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def bw(g):
        gx = g * gamma.data[None, :, None]
        if x.requires_grad:
            m1 = gx.mean(axis=axes, keepdims=True)
            m2 = (gx * xhat).mean(axis=axes, keepdims=True)
            x.accumulate_grad(inv * (gx - m1 - xhat * m2))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))

    return _result("batch_norm", data, (x, gamma, beta), bw)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else x.shape[axis]

    def bw(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate_grad(np.full_like(x.data, g / count))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x.accumulate_grad(np.broadcast_to(ge / count, x.shape).copy())

    return _result("mean", np.asarray(data), (x,), bw)


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate_grad(np.full_like(x.data, g))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x.accumulate_grad(np.broadcast_to(ge, x.shape).copy())

    return _result("sum", np.asarray(data), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate_grad(p)

    return _result("concat", data, tensors, bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    if not (0 <= start <= stop <= x.shape[axis]):
        raise ShapeError(
            f"slice: [{start}:{stop}] out of bounds for axis {axis} with extent {x.shape[axis]}")
    index = tuple(slice(None) if i != axis else slice(start, stop) for i in range(x.ndim))
    data = x.data[index].copy()

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[index] = g
            x.accumulate_grad(full)

    return _result("slice", data, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.transpose(g, inverse))

    return _result("transpose", data, (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return _result("reshape", data, (x,), bw)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup table[indices]; gradients scatter-add back into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: index out of range [0,{table.shape[0]}), got min {idx.min()} max {idx.max()}")
    data = table.data[idx]

    def bw(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx, g)
            table.accumulate_grad(acc)

    return _result("embedding", data, (table,), bw)


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along the first axis."""
    x = as_tensor(x)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range [0,{x.shape[0]})")
    data = x.data[idx]

    def bw(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            np.add.at(acc, idx, g)
            x.accumulate_grad(acc)

    return _result("take_rows", data, (x,), bw)


def scatter_rows(indices: np.ndarray, rows: Tensor, n_rows: int) -> Tensor:
    """Dense (n_rows, D) built by add-scattering ``rows`` at ``indices``."""
    rows = as_tensor(rows)
    idx = np.asarray(indices)
    data = np.zeros((n_rows,) + rows.shape[1:], dtype=rows.data.dtype)
    np.add.at(data, idx, rows.data)

    def bw(g):
        if rows.requires_grad:
            rows.accumulate_grad(g[idx])

    return _result("scatter_rows", data, (rows,), bw)


def replace_rows(x: Tensor, flat_indices: np.ndarray, row: Tensor) -> Tensor:
    """Copy of x with the rows at ``flat_indices`` (indices into the
    flattened leading axes) overwritten by the single vector ``row``."""
    x, row = as_tensor(x), as_tensor(row)
    d = x.shape[-1]
    if row.shape != (d,):
        raise ShapeError(f"replace_rows: row shape {row.shape} != ({d},)")
    idx = np.asarray(flat_indices)
    flat = x.data.reshape(-1, d).copy()
    if idx.size and (idx.min() < 0 or idx.max() >= flat.shape[0]):
        raise ShapeError(f"replace_rows: index out of range [0,{flat.shape[0]})")
    flat[idx] = row.data
    data = flat.reshape(x.shape)

    def bw(g):
        gf = g.reshape(-1, d)
        if x.requires_grad:
            gx = gf.copy()
            gx[idx] = 0
            x.accumulate_grad(gx.reshape(x.shape))
        if row.requires_grad:
            row.accumulate_grad(gf[idx].sum(axis=0))

    return _result("replace_rows", data, (x, row), bw)


def gather_last(x: Tensor, indices: np.ndarray) -> Tensor:
    """Per-row gather along the last axis of a 2-d tensor: out[i,j] = x[i, idx[i,j]]."""
    x = as_tensor(x)
    idx = np.asarray(indices)
    if x.ndim != 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_last: need (N,M) values and (N,k) indices, got {x.shape}, {idx.shape}")
    data = np.take_along_axis(x.data, idx, axis=1)

    def bw(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            np.add.at(acc, (np.arange(x.shape[0])[:, None], idx), g)
            x.accumulate_grad(acc)

    return _result("gather_last", data, (x,), bw)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of (N, D) by the matching scalar from (N,)."""
    x, s = as_tensor(x), as_tensor(s)
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: need (N,D) and (N,), got {x.shape}, {s.shape}")
    data = x.data * s.data[:, None]

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * s.data[:, None])
        if s.requires_grad:
            s.accumulate_grad((g * x.data).sum(axis=1))

    return _result("scale_rows", data, (x, s), bw)


def rope(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotary position encoding over the last axis of (..., L, D).

    Feature pairs (2i, 2i+1) are rotated by angle m * theta_i where m is the
    position of the row and theta_i = base^(-2i/D), i = 0..D/2-1 (so the
    first pair rotates with theta = 1).  Rotations are orthogonal, so the
    adjoint is simply the rotation by -m.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"rope: last axis must be even, got {d}")
    length = x.shape[-2]
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (length,):
        raise ShapeError(f"rope: positions must have shape ({length},), got {pos.shape}")
    half = d // 2
    theta = float(base) ** (-2.0 * np.arange(half) / d)
    angles = pos[:, None] * theta[None, :]
    cos = np.cos(angles).astype(x.data.dtype)
    sin = np.sin(angles).astype(x.data.dtype)
    even = x.data[..., 0::2]
    odd = x.data[..., 1::2]
    data = np.empty_like(x.data)
    data[..., 0::2] = even * cos - odd * sin
    data[..., 1::2] = even * sin + odd * cos

    def bw(g):
        if x.requires_grad:
            ge = g[..., 0::2]
            go = g[..., 1::2]
            gx = np.empty_like(g)
            gx[..., 0::2] = ge * cos + go * sin
            gx[..., 1::2] = -ge * sin + go * cos
            x.accumulate_grad(gx)

    return _result("rope", data, (x,), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (B,C), got {logits.shape}")
    y = np.asarray(labels)
    b, c = logits.shape
    if y.shape != (b,):
        raise ShapeError(f"cross_entropy: labels must be ({b},), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValidationError(f"cross_entropy: label out of range [0,{c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    data = np.asarray((lse - shifted[np.arange(b), y]).mean())
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def bw(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(b), y] -= 1.0
            logits.accumulate_grad(d * (g / b))

    return _result("cross_entropy", data, (logits,), bw)


def squared_error(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences (composite of the primitives)."""
    diff = sub(a, b)
    return tsum(mul(diff, diff))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class CheckEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class CheckReport:
    tol: float
    max_rel_err: float
    passed: bool
    entries: list[CheckEntry] = field(repr=False, default_factory=list)

    def worst(self) -> CheckEntry:
        return max(self.entries, key=lambda e: e.rel_err)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], *,
               step: float = 1e-5, tol: float = 1e-4,
               samples_per_tensor: int | None = None,
               rng: np.random.Generator | None = None,
               retry_steps: tuple[float, ...] = (1e-6, 3e-7)) -> CheckReport:
    """Compare analytic adjoints against central finite differences.

    ``f`` is a zero-argument closure over ``params`` returning a scalar
    Tensor; it must be deterministic (fix any masks/draws outside).  Run in
    float64 mode; float32 finite differences are too noisy to be meaningful.
    Per component, the relative error divides by max(|analytic|, |numeric|)
    floored at ``step`` so that components below the finite-difference
    resolution cannot dominate the report.

    A component that fails at ``step`` is re-probed at ``retry_steps``:
    piecewise boundaries (a ReLU argument or a routing margin crossing zero
    inside the probe window) produce one-off finite-difference artifacts
    that vanish once the window shrinks past the crossing, whereas a wrong
    adjoint keeps failing at every step size.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValidationError(
                f"grad_check requires float64 parameters (got {p.data.dtype}); "
                "build the model inside f64_mode()")
        p.zero_grad()
    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    floor = step

    def central(flat, i, h):
        saved = flat[i]
        flat[i] = saved + h
        up = f().item()
        flat[i] = saved - h
        down = f().item()
        flat[i] = saved
        return (up - down) / (2.0 * h)

    def rel_err(ana, numeric):
        return abs(ana - numeric) / max(abs(ana), abs(numeric), floor)

    entries: list[CheckEntry] = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_tensor is None or samples_per_tensor >= n:
            chosen = np.arange(n)
        else:
            chosen = rng.choice(n, size=samples_per_tensor, replace=False)
        for i in chosen:
            ana = float(a.reshape(-1)[i])
            numeric = central(flat, i, step)
            rel = rel_err(ana, numeric)
            if rel >= tol:
                for smaller in retry_steps:
                    candidate = central(flat, i, smaller)
                    if rel_err(ana, candidate) < rel:
                        numeric, rel = candidate, rel_err(ana, candidate)
                    if rel < tol:
                        break
            entries.append(CheckEntry(p.name or "param", np.unravel_index(i, p.shape),
                                      ana, numeric, rel))
    worst = max(e.rel_err for e in entries) if entries else 0.0
    return CheckReport(tol=tol, max_rel_err=worst, passed=worst < tol, entries=entries)


# ---------------------------------------------------------------------------
# single-tensor serialization (shared with the checkpoint format)
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor_record(fh, name: str, arr: np.ndarray) -> None:
    """name (length-prefixed UTF-8), dtype tag, rank, extents, LE payload."""
    blob = name.encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    if arr.dtype == np.float32:
        tag = 0
    elif arr.dtype == np.float64:
        tag = 1
    else:
        raise ValidationError(f"cannot serialise tensor dtype {arr.dtype}")
    fh.write(struct.pack("<B", tag))
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())


def _read_exact(fh, n: int) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise EOFError(f"expected {n} bytes, got {len(blob)}")
    return blob


def read_tensor_record(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode("utf-8")
    (tag,) = struct.unpack("<B", _read_exact(fh, 1))
    if tag not in _DTYPE_TAGS:
        raise EOFError(f"unknown dtype tag {tag}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    dtype = _DTYPE_TAGS[tag]
    payload = _read_exact(fh, count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return name, arr
