"""Dense float64 tensors with tape-based reverse-mode differentiation.

Define-by-run: while a Tape is active (see `tape()`), every primitive
records itself in execution order, so the record is topologically sorted
by construction. `backward(loss)` walks the tape once in reverse and
accumulates gradients into every tensor that participated. A tape is
consumable exactly once.

Shapes are explicit everywhere: binary ops require identical shapes, the
only broadcasting allowed is scalar-with-tensor. All data is float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the named operation."""


class NonFiniteError(ValueError):
    """An operation received a NaN or Inf input."""


class TapeError(RuntimeError):
    """Backward called on a non-scalar, a consumed tape, or no tape."""


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    `grad` is populated by `backward()`: accumulated (+=) for tensors
    created with requires_grad=True, assigned for intermediates.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs: list[Tensor], output: Tensor, backward_fn: Callable):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive ops; inputs always precede their users."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def _append(self, node: _Node) -> None:
        self.nodes.append(node)
        node.output._tape = self


_TAPES: list[Tape] = []


class tape:
    """Context manager that activates a fresh Tape for recording."""

    def __enter__(self) -> Tape:
        t = Tape()
        _TAPES.append(t)
        return t

    def __exit__(self, *exc) -> None:
        _TAPES.pop()


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(out: Tensor, inputs: list[Tensor], backward_fn: Callable) -> Tensor:
    t = _active()
    if t is not None:
        t._append(_Node(inputs, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of everything that produced the scalar `loss`."""
    if loss.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    t = loss._tape
    if t is None:
        raise TapeError("loss was not recorded on any tape")
    if t.consumed:
        raise TapeError("tape already consumed; rebuild the forward pass")
    t.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(t.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, gin in zip(node.inputs, node.backward_fn(g)):
            if gin is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
    # whatever is left belongs to leaves (params, constants)
    for node in t.nodes:
        for inp in node.inputs:
            gin = grads.pop(id(inp), None)
            if gin is None:
                continue
            if inp.requires_grad and inp.grad is not None:
                inp.grad = inp.grad + gin
            else:
                inp.grad = gin


# ---------------------------------------------------------------------------
# primitive helpers

def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(f"{op}: non-finite input")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _unbroadcast_scalar(g: np.ndarray) -> np.ndarray:
    return np.asarray(g.sum()).reshape(())


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("add", a.data, b.data)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} do not match")
    out = Tensor(a.data + b.data)

    def bwd(g):
        ga = _unbroadcast_scalar(g).reshape(a.shape) if _is_scalar(a) and a.shape != g.shape else g
        gb = _unbroadcast_scalar(g).reshape(b.shape) if _is_scalar(b) and b.shape != g.shape else g
        return ga, gb

    return _record(out, [a, b], bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("mul", a.data, b.data)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeMismatch(f"mul: shapes {a.shape} and {b.shape} do not match")
    out = Tensor(a.data * b.data)

    def bwd(g):
        ga = g * b.data
        gb = g * a.data
        if _is_scalar(a) and a.shape != ga.shape:
            ga = _unbroadcast_scalar(ga).reshape(a.shape)
        if _is_scalar(b) and b.shape != gb.shape:
            gb = _unbroadcast_scalar(gb).reshape(b.shape)
        return ga, gb

    return _record(out, [a, b], bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("matmul", a.data, b.data)
    ok = (a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0]) or (
        a.data.ndim == 3 and b.data.ndim == 3
        and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]
    )
    if not ok:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return ga, gb

    return _record(out, [a, b], bwd)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    _check_finite("transpose", a.data)
    perm = tuple(axes) if axes is not None else tuple(range(a.data.ndim))[::-1]
    out = Tensor(np.transpose(a.data, perm))
    inv = np.argsort(perm)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record(out, [a], bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    _check_finite("reshape", a.data)
    try:
        out = Tensor(a.data.reshape(tuple(shape)))
    except ValueError as e:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {tuple(shape)}") from e
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _record(out, [a], bwd)


def concat_last(tensors: Sequence[Tensor]) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    _check_finite("concat_last", *[t.data for t in ts])
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeMismatch(
                f"concat_last: leading dims differ, {ts[0].shape} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in ts], axis=-1))
    sizes = [t.shape[-1] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=-1))

    return _record(out, ts, bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    _check_finite("slice_axis", a.data)
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeMismatch(
            f"slice_axis: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record(out, [a], bwd)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    table = _as_tensor(table)
    _check_finite("embedding", table.data)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatch("embedding: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch(
            f"embedding: index out of range for table of {table.shape[0]} rows")
    out = Tensor(table.data[idx])
    dim = table.shape[1]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, dim))
        return (gt,)

    return _record(out, [table], bwd)


def softmax_last(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_finite("softmax_last", a.data)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, [a], bwd)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _as_tensor(a)
    _check_finite("layer_norm", a.data)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat)

    def bwd(g):
        m1 = g.mean(axis=-1, keepdims=True)
        m2 = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - m1 - xhat * m2),)

    return _record(out, [a], bwd)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian-error linear unit, tanh form (the standard GPT formulation)."""
    a = _as_tensor(a)
    _check_finite("gelu", a.data)
    x = a.data
    x2 = x * x
    inner = _GELU_K * x2
    inner += 1.0
    inner *= _GELU_C * x
    t = np.tanh(inner)
    half_x = 0.5 * x
    out = Tensor(half_x * (1.0 + t))

    def bwd(g):
        sech2 = 1.0 - t * t
        du = 3.0 * _GELU_K * x2
        du += 1.0
        du *= _GELU_C
        deriv = half_x * sech2
        deriv *= du
        deriv += 0.5 * (1.0 + t)
        return (g * deriv,)

    return _record(out, [a], bwd)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_finite("exp", a.data)
    e = np.exp(a.data)
    out = Tensor(e)

    def bwd(g):
        return (g * e,)

    return _record(out, [a], bwd)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_finite("log", a.data)
    if (a.data <= 0).any():
        raise NonFiniteError("log: requires strictly positive input")
    out = Tensor(np.log(a.data))

    def bwd(g):
        return (g / a.data,)

    return _record(out, [a], bwd)


def _reduce(a: Tensor, axis: int | None, keepdims: bool, op: str) -> tuple:
    a = _as_tensor(a)
    _check_finite(op, a.data)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return a, n


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a, _ = _reduce(a, axis, keepdims, "sum")
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record(out, [a], bwd)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a, n = _reduce(a, axis, keepdims, "mean")
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, shape).copy(),)

    return _record(out, [a], bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast across rows; x is 2D [n, k], w [k, m], b [m]."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    _check_finite("affine", x.data, w.data, b.data)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1 or \
            x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeMismatch(
            f"affine: shapes {x.shape}, {w.shape}, {b.shape} do not conform")
    y = x.data @ w.data
    y += b.data
    out = Tensor(y)

    def bwd(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _record(out, [x, w, b], bwd)


def scale_shift(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """x * gain + bias on the last axis; gain and bias are 1D of size x.shape[-1]."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    _check_finite("scale_shift", x.data, gain.data, bias.data)
    if gain.data.ndim != 1 or bias.data.ndim != 1 or \
            gain.shape[0] != x.shape[-1] or bias.shape[0] != x.shape[-1]:
        raise ShapeMismatch(
            f"scale_shift: shapes {x.shape}, {gain.shape}, {bias.shape} do not conform")
    out = Tensor(x.data * gain.data + bias.data)
    axes = tuple(range(x.data.ndim - 1))

    def bwd(g):
        return g * gain.data, (g * x.data).sum(axis=axes), g.sum(axis=axes)

    return _record(out, [x, gain, bias], bwd)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace a[mask] with `value`; gradient there is exactly zero."""
    a = _as_tensor(a)
    _check_finite("masked_fill", a.data)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeMismatch(
            f"masked_fill: mask {mask.shape} does not match tensor {a.shape}")
    out = Tensor(np.where(mask, value, a.data))
    keep = ~mask

    def bwd(g):
        return (g * keep,)

    return _record(out, [a], bwd)
