"""Dense float tensors with taped reverse-mode differentiation.

Everything here is numpy-backed and deliberately small: row-major dense
arrays, a handful of primitive ops, and an explicit gradient tape. Float32
is the working precision; ops preserve float64 inputs so oracles can run a
block in higher precision.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FINITE_CHECKS = True
_TAPE_STACK: list["GradTape"] = []


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the NaN/Inf guard on op outputs. Returns the previous state."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


def _all_finite(arr: np.ndarray) -> bool:
    if arr.size == 0:
        return True
    # one reduction pass: any NaN/Inf in the array poisons the sum
    return math.isfinite(float(arr.sum()))


class Tensor:
    """A dense float array plus a flag marking it as differentiable.

    Data is C-contiguous float32 unless float64 input is passed explicitly.
    Tensors are treated as immutable once created; parameters are updated by
    rebinding `.data` through `assign`.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.asarray(arr, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray would 1-d-ify scalars
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        return t

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def assign(self, new_data: np.ndarray) -> None:
        """Replace the backing array (parameter update); shape must match."""
        arr = np.ascontiguousarray(new_data, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ValueError(f"assign shape mismatch: {arr.shape} vs {self.data.shape}")
        arr.setflags(write=False)
        self.data = arr

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are wrapped as constants
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, dtype=None) -> Tensor:
    """A trainable leaf tensor; the array is locked against in-place writes."""
    t = Tensor(data, requires_grad=True, dtype=dtype)
    if t.data.base is None:
        t.data.setflags(write=False)
    else:
        t.data = t.data.copy()
        t.data.setflags(write=False)
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _TapeOp(NamedTuple):
    name: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]


class GradTape:
    """Ordered record of primitive ops, replayed in reverse by `backward`."""

    def __init__(self):
        self._ops: list[_TapeOp] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._ops)


def _record(name: str, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
    if not _TAPE_STACK:
        return
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE_STACK[-1]._ops.append(_TapeOp(name, out, inputs, backward))


def _op(name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if _FINITE_CHECKS and not _all_finite(out_data):
        raise FloatingPointError(f"non-finite values produced by op '{name}'")
    out = Tensor._wrap(out_data)
    _record(name, out, inputs, backward)
    return out


def backward(tape: GradTape, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss for every tensor in `params`.

    Parameters that did not participate in the loss get zero gradients.
    Raises if the loss is not scalar or a non-finite gradient appears,
    naming the op that produced it.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape._ops):
        g = grads.pop(id(op.out), None)
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if _FINITE_CHECKS and not _all_finite(gi):
                raise FloatingPointError(f"non-finite gradient from op '{op.name}'")
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi
    out: dict[Tensor, np.ndarray] = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = np.zeros_like(p.data) if g is None else np.ascontiguousarray(g, dtype=p.data.dtype)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _op("add", out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _op("sub", out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _op(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _op(
        "div", out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _op("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _op("exp", out, (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _op("sqrt", out, (a,), lambda g: (g * (0.5 / out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    inner = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    out = 0.5 * x * (1.0 + inner)

    def bwd(g):
        # d/dx = 0.5*(1 + inner) + 0.5*x*(1 - inner^2)*C*(1 + 3A*x^2),
        # written with in-place updates to avoid a pile of temporaries
        du = x * x
        du *= 3.0 * _GELU_A
        du += 1.0
        du *= _GELU_C
        t = inner * inner
        np.subtract(1.0, t, out=t)
        t *= du
        t *= x
        t += 1.0
        t += inner
        t *= 0.5
        t *= g
        return (t,)

    return _op("gelu", out, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _op("matmul", out, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b) with leading dims flattened into a single GEMM.

    `w` is [d_in, d_out]; `b`, if given, is [d_out]. Substantially faster than
    a batched matmul when x carries several leading axes.
    """
    x, w = as_tensor(x), as_tensor(w)
    *lead, d_in = x.shape
    x2 = x.data.reshape(-1, d_in)
    out2 = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        if b.data.dtype == out2.dtype:
            out2 += b.data
        else:  # keep promotion exact for shadow-precision runs
            out2 = out2 + b.data
    out = out2.reshape(*lead, w.shape[1])

    def bwd(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.data.shape)
        gw = x2.T @ g2
        if b is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    return _op("linear", out, (x, w) if b is None else (x, w, b), bwd)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = np.argsort(axes)
    return _op("transpose", out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _op("reshape", out, (a,), lambda g: (g.reshape(a.data.shape),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(p) for p in parts)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _op("concat", out, ts, bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _op("narrow", out, (a,), bwd)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape),)

    return _op("sum", np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[i] for i in axis]))
    else:
        count = a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Select rows along the second-to-last axis.

    `a` is [L, D] with idx [m], or [B, L, D] with idx [B, m].
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim == 2 and idx.ndim == 1:
        out = a.data[idx]

        def bwd(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

    elif a.ndim == 3 and idx.ndim == 2:
        out = np.take_along_axis(a.data, idx[:, :, None], axis=1)
        rows = np.arange(a.shape[0])[:, None]

        def bwd(g):
            full = np.zeros_like(a.data)
            np.add.at(full, (rows, idx), g)
            return (full,)

    else:
        raise ValueError(f"gather_rows: unsupported ranks {a.ndim}/{idx.ndim}")
    return _op("gather_rows", np.ascontiguousarray(out), (a,), bwd)


def scatter_rows(base, idx: np.ndarray, src) -> Tensor:
    """Copy of `base` with rows at `idx` replaced by `src` (same rank rules as gather_rows)."""
    base, src = as_tensor(base), as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    out = base.data.copy()
    if base.ndim == 2 and idx.ndim == 1:
        out[idx] = src.data

        def bwd(g):
            gb = g.copy()
            gb[idx] = 0.0
            return (gb, g[idx])

    elif base.ndim == 3 and idx.ndim == 2:
        np.put_along_axis(out, idx[:, :, None], src.data, axis=1)

        def bwd(g):
            gb = g.copy()
            np.put_along_axis(gb, idx[:, :, None], 0.0, axis=1)
            return (gb, np.take_along_axis(g, idx[:, :, None], axis=1))

    else:
        raise ValueError(f"scatter_rows: unsupported ranks {base.ndim}/{idx.ndim}")
    return _op("scatter_rows", out, (base, src), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) with a fused backward."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _op("softmax", out, (a,), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean/unit variance, then scale+shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    dim = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _op("layer_norm", out, (x, gamma, beta), bwd)


def select(indicator, on_true, on_false) -> Tensor:
    """Elementwise blend `ind*a + (1-ind)*b` with a constant 0/1 indicator."""
    ind = as_tensor(indicator)
    return add(mul(ind, on_true), mul(sub(1.0, ind), on_false))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between the taped gradient of `f` at `x` and
    float64 central differences.

    `f` must be deterministic and return a scalar Tensor. The numeric side
    evaluates `f` on float64 copies of `x` so the difference quotient is not
    drowned by float32 rounding; mixed-precision promotion inside `f` keeps
    that exact.
    """
    if not (0.0 < eps < 1e-1):
        raise ValueError(f"eps must be in (0, 0.1), got {eps}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with GradTape() as tape:
        loss = f(probe)
    if loss.size != 1:
        raise ValueError("finite_diff_check: f must return a scalar")
    analytic = backward(tape, loss, [probe])[probe].astype(np.float64).ravel()

    base = x.data.astype(np.float64).ravel()
    numeric = np.zeros_like(base)
    for i in range(base.size):
        vals = []
        for delta in (eps, -eps):
            pert = base.copy()
            pert[i] += delta
            y = f(Tensor(pert.reshape(x.shape)))
            yv = float(y.data.reshape(()))
            if not math.isfinite(yv):
                raise FloatingPointError("finite_diff_check: f returned a non-finite value at a perturbed point")
            vals.append(yv)
        numeric[i] = (vals[0] - vals[1]) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
