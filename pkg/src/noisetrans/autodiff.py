"""Dense tensors with tape-based reverse-mode differentiation.

All storage is numpy. Gradients are only recorded while a Tape is active
(``with Tape() as tape: ...``); outside a tape every operation is plain
forward arithmetic, which keeps inference cheap.

Determinism: every reduction uses numpy's fixed left-to-right order, max/min
route their gradient to the first attaining index, and the tape replays ops
in exact reverse execution order, so identical inputs give bitwise-identical
outputs and gradients.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

from .errors import ArgumentError, ContractError, NumericError

_DTYPE = np.dtype(np.float64)

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def set_default_dtype(dtype) -> None:
    """Set the dtype newly created tensors use (float64 or float32)."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ArgumentError(f"unsupported tensor dtype {dt}; use float32 or float64")
    _DTYPE = dt


def default_dtype() -> np.dtype:
    return _DTYPE


_TAPE_STACK: list["Tape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed ops; backward replays it in reverse."""

    def __init__(self):
        # entries are (op_name, output_tensor, pull_fn)
        self._records = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss: "Tensor") -> None:
        """Populate .grad on every requires_grad leaf reachable from loss.

        Repeated calls without zeroing leaf grads accumulate; intermediate
        grads are cleared before each replay.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward expects a scalar loss, got shape {loss.shape}"
            )
        if not self._records:
            raise ContractError("backward called on an empty tape")
        for _, out, _ in self._records:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for name, out, pull in reversed(self._records):
            if out.grad is not None:
                pull()


class Tensor:
    """A dense n-d array that may participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(name: str, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    # a single fused reduction catches NaN/inf far cheaper than isfinite().all()
    if not np.isfinite(np.abs(g).sum()):
        raise NumericError(f"non-finite gradient produced by op '{name}'")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _record(name: str, out: Tensor, inputs, backward) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True

    def pull():
        backward(out.grad)

    tape._records.append((name, out, pull))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        _accum("add", a, _unbroadcast(g, a.shape))
        _accum("add", b, _unbroadcast(g, b.shape))

    return _record("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def bw(g):
        _accum("sub", a, _unbroadcast(g, a.shape))
        _accum("sub", b, _unbroadcast(-g, b.shape))

    return _record("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        _accum("mul", a, _unbroadcast(g * b.data, a.shape))
        _accum("mul", b, _unbroadcast(g * a.data, b.shape))

    return _record("mul", out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ArgumentError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data))

    def bw(g):
        _accum("matmul", a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.ndim == 2 and a.ndim > 2:
            # shared-weight case: one tensordot beats batched matmul + sum
            lead = tuple(range(a.ndim - 1))
            _accum("matmul", b, np.tensordot(a.data, g, axes=(lead, lead)))
        else:
            _accum("matmul", b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _record("matmul", out, (a, b), bw)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))

    def bw(g):
        _accum("relu", x, np.where(mask, g, 0.0))

    return _record("relu", out, (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    out = Tensor(s)

    def bw(g):
        _accum("sigmoid", x, g * s * (1.0 - s))

    return _record("sigmoid", out, (x,), bw)


def gelu(x) -> Tensor:
    """Exact GELU x * Phi(x) with Phi the standard normal CDF (erf form)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = Tensor(x.data * cdf)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _accum("gelu", x, g * (cdf + x.data * pdf))

    return _record("gelu", out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum("softmax", x, s * (g - dot))

    return _record("softmax", out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ArgumentError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gain.data * xhat + bias.data)

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accum("layer_norm", gain, (g * xhat).sum(axis=lead))
        _accum("layer_norm", bias, g.sum(axis=lead))
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        _accum("layer_norm", x, inv * (gg - m1 - xhat * m2))

    return _record("layer_norm", out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def gather_rows(x, idx) -> Tensor:
    """out[..., :] = x[idx[...], :] for a 2-D x; backward scatter-adds."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ArgumentError(f"gather_rows expects a 2-D tensor, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(
            f"gather_rows: index out of range for {n} rows (min {idx.min()}, max {idx.max()})"
        )
    out = Tensor(x.data[idx])

    def bw(g):
        flat = idx.reshape(-1)
        g2 = g.reshape(-1, x.shape[1])
        gx = np.empty_like(x.data)
        for j in range(x.shape[1]):  # bincount per column is much faster than add.at
            gx[:, j] = np.bincount(flat, weights=g2[:, j], minlength=n)
        _accum("gather_rows", x, gx)

    return _record("gather_rows", out, (x,), bw)


def _check_axis(x: Tensor, axis: int, name: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ArgumentError(f"{name}: axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def reduce_max(x, axis: int) -> Tensor:
    """Max along axis; gradient routed to the first attaining index."""
    return _reduce_extreme(x, axis, np.max, np.argmax, "reduce_max")


def reduce_min(x, axis: int) -> Tensor:
    """Min along axis; gradient routed to the first attaining index."""
    return _reduce_extreme(x, axis, np.min, np.argmin, "reduce_min")


def _reduce_extreme(x, axis, reducer, arg_reducer, name) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis, name)
    if x.shape[axis] < 1:
        raise ArgumentError(f"{name}: axis {axis} is empty in shape {x.shape}")
    out = Tensor(reducer(x.data, axis=axis))
    arg = arg_reducer(x.data, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(
            gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis
        )
        _accum(name, x, gx)

    return _record(name, out, (x,), bw)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            _accum("reduce_sum", x, np.broadcast_to(g, x.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum("reduce_sum", x, np.broadcast_to(ge, x.shape))

    return _record("reduce_sum", out, (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        count = x.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ArgumentError("concat of an empty list")
    ref = tensors[0]
    axis = _check_axis(ref, axis, "concat")
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            i != axis and t.shape[i] != ref.shape[i] for i in range(ref.ndim)
        ):
            raise ArgumentError(
                f"concat: shape {t.shape} incompatible with {ref.shape} on axis {axis}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum("concat", t, piece)

    return _record("concat", out, tuple(tensors), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def bw(g):
        _accum("reshape", x, g.reshape(x.shape))

    return _record("reshape", out, (x,), bw)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))

    def bw(g):
        _accum("transpose", x, g.transpose(inv))

    return _record("transpose", out, (x,), bw)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.broadcast_to(x.data, shape).copy())

    def bw(g):
        _accum("broadcast_to", x, _unbroadcast(g, x.shape))

    return _record("broadcast_to", out, (x,), bw)


def pairwise_sqdist(a, b) -> Tensor:
    """D[i, j] = ||a_i - b_j||^2 for a (N, 3) and b (M, 3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ArgumentError(
            f"pairwise_sqdist: incompatible shapes {a.shape} and {b.shape}"
        )
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = Tensor((diff * diff).sum(axis=-1))

    def bw(g):
        _accum("pairwise_sqdist", a, 2.0 * np.einsum("ij,ijk->ik", g, diff))
        _accum("pairwise_sqdist", b, -2.0 * np.einsum("ij,ijk->jk", g, diff))

    return _record("pairwise_sqdist", out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias), the shared-weight dense layer used everywhere."""
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    return y
