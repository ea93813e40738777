"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Deliberately small: exactly the operations a two-channel toy transformer
needs, all in 64-bit floats, plus a central-difference oracle that the test
suite uses to cross-check every backward rule.

Recording is define-by-run. Ops record onto the innermost active
``ComputeTape`` whenever at least one input requires a gradient; with no
tape active (inference) nothing is recorded and tensors stay light. The
freeze contract is enforced at accumulation time: a tensor with
``requires_grad=False`` never has a gradient buffer allocated, no matter
what flows through it.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray


class Tensor:
    """A dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._tape: ComputeTape | None = None

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
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # elementwise / reductions as methods ------------------------------

    def sum(self, axis: int | None = None):
        return sum_(self, axis)

    def mean(self, axis: int | None = None):
        return mean(self, axis)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sin(self):
        return sin(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------
# Tape
# ----------------------------------------------------------------------


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class ComputeTape:
    """Ordered record of primitive ops, replayed in reverse by backward()."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "ComputeTape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.records)


_TAPES: list[ComputeTape] = []


def _active_tape() -> ComputeTape | None:
    return _TAPES[-1] if _TAPES else None


def _make(out_data: Array, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build an op output, recording it when grads are needed."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.records.append(_Record(out, inputs, backward_fn))
            out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable requires_grad tensor.

    Replays the loss's tape once, in reverse recording order. Frozen
    tensors (requires_grad=False) are never touched.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        # Leaf or untracked scalar: nothing upstream of it.
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = gi.copy() if isinstance(gi, np.ndarray) else np.asarray(gi)
            else:
                t.grad = t.grad + gi


# ----------------------------------------------------------------------
# Primitive ops
# ----------------------------------------------------------------------


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the original shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; dA = dC @ B^T, dB = A^T @ dC."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    out = a.data.reshape(shape)
    return _make(out.copy(), (a,), lambda g: (g.reshape(a.shape),))


def col_slice(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"col_slice: expected 2-D tensor, got {a.shape}")
    out = a.data[:, start:stop].copy()

    def bwd(g):
        z = np.zeros_like(a.data)
        z[:, start:stop] = g
        return (z,)

    return _make(out, (a,), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols: empty sequence")
    widths = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g):
        grads = []
        start = 0
        for w in widths:
            grads.append(g[:, start : start + w])
            start += w
        return tuple(grads)

    return _make(out, tuple(parts), bwd)


def select_row(a: Tensor, i: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"select_row: expected 2-D tensor, got {a.shape}")
    out = a.data[i].copy()

    def bwd(g):
        z = np.zeros_like(a.data)
        z[i] = g
        return (z,)

    return _make(out, (a,), bwd)


def embed(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of an embedding table; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.intp)
    out = table.data[idx].copy()

    def bwd(g):
        z = np.zeros_like(table.data)
        np.add.at(z, idx, g)
        return (z,)

    return _make(out, (table,), bwd)


def pick_per_row(x: Tensor, ids: Sequence[int]) -> Tensor:
    """x[i, ids[i]] for each row i."""
    idx = np.asarray(ids, dtype=np.intp)
    if x.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"pick_per_row: shape {x.shape} vs {idx.shape[0]} ids")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx].copy()

    def bwd(g):
        z = np.zeros_like(x.data)
        z[rows, idx] = g
        return (z,)

    return _make(out, (x,), bwd)


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along one axis; outputs sum to 1 there."""
    ax = _norm_axis(axis, max(x.ndim, 1), "softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _make(s, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, max(x.ndim, 1), "log_softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def bwd(g):
        return (g - sm * g.sum(axis=ax, keepdims=True),)

    return _make(y, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of the last axis to zero mean / unit variance, then affine.

    A constant row maps to the bias: eps keeps the reciprocal finite and the
    normalized value is exactly zero.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last dim ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), bwd)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a: Tensor) -> Tensor:
    # exp of a non-positive argument only: no overflow either side of 0.
    z = np.exp(-np.abs(a.data))
    s = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.data.size
        out = x.data.mean()

        def bwd(g):
            return (np.broadcast_to(g / n, x.shape).copy(),)

        return _make(out, (x,), bwd)
    ax = _norm_axis(axis, x.ndim, "mean")
    n = x.shape[ax]
    out = x.data.mean(axis=ax)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, x.shape).copy(),)

    return _make(out, (x,), bwd)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = x.data.sum()

        def bwd(g):
            return (np.broadcast_to(g, x.shape).copy(),)

        return _make(out, (x,), bwd)
    ax = _norm_axis(axis, x.ndim, "sum")
    out = x.data.sum(axis=ax)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return _make(out, (x,), bwd)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def bwd(g):
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    return _make(out, (a, b), bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)

    def bwd(g):
        return (g * mask,)

    return _make(out, (x,), bwd)


# ----------------------------------------------------------------------
# Gradient oracle
# ----------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure, scalar-valued function of its tensor argument.
    Error per coordinate is |analytic - numeric| / max(1, |analytic|);
    the maximum over coordinates is returned.
    """
    base = Tensor(point.data.copy(), requires_grad=True)
    with ComputeTape():
        out = f(base)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ContractError("finite_diff_check: f must return a scalar tensor")
        backward(out)
    analytic = base.grad if base.grad is not None else np.zeros_like(base.data)
    analytic = analytic.reshape(-1)

    flat = point.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        f_plus = f(Tensor(bumped.reshape(point.shape))).item()
        bumped[i] = flat[i] - h
        f_minus = f(Tensor(bumped.reshape(point.shape))).item()
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
