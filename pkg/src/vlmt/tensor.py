"""Minimal dense-tensor kernel with masked attention primitives and a
record-on-execute reverse-mode gradient tape.

Values live in row-major numpy arrays, float32 by default with a float64
mode used for gradient checking. Every primitive computes its forward
result eagerly and, when a tape is active, appends a backward closure to
it. Because nodes are appended in execution order, walking the tape in
reverse visits them in reverse topological order exactly once.

Thread contract: a tape and the tensors recorded on it belong to a single
forward/backward pass on one thread. Tensors with no live tape reference
are plain immutable values and safe to share across threads.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractViolation(ValueError):
    """An operation was invoked outside its stated contract."""


class FullyMaskedRowError(ContractViolation):
    """A softmax query row had no permitted key."""


class NumericError(ArithmeticError):
    """A kernel produced a non-finite value (only raised with checks on)."""


# Optional per-op finiteness checking. Off by default; tests and the
# gradient checker turn it on to catch NaN/Inf at the op that made them.
_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715
NEG_FILL = -1e9  # stand-in for -inf on forbidden attention logits


class Tensor:
    """A dense array plus an optional link to the tape that produced it.

    ``data`` is never mutated by kernels; ``grad`` is filled lazily during
    the backward pass and holds the same shape/dtype as ``data``.
    """

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, tape: "Tape | None" = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications plus a parameter registry.

    ``backward`` replays the record once, in reverse, accumulating grads
    into every tensor on the path and returning one gradient per
    registered parameter (zeros for parameters off the path).
    """

    def __init__(self):
        self._steps: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._params: dict[str, Tensor] = {}
        self._consumed = False

    def parameter(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractViolation(f"parameter {name!r} registered twice on one tape")
        leaf = Tensor(array, tape=self)
        self._params[name] = leaf
        return leaf

    @property
    def num_steps(self) -> int:
        return len(self._steps)

    def _record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._steps.append((out, backward))

    def backward(self, output: Tensor) -> dict[str, np.ndarray]:
        """Replay the record once in reverse; returns per-parameter grads.

        The tape is one-shot: the op record is released afterwards so the
        intermediate graph frees promptly (tensors keep their ``grad``).
        """
        if output.data.size != 1:
            raise ContractViolation(
                f"backward requires a scalar output, got shape {output.data.shape}"
            )
        if self._consumed:
            raise ContractViolation("tape already replayed; record a fresh forward")
        output.grad = np.ones_like(output.data)
        for out, bwd in reversed(self._steps):
            if out.grad is not None:
                bwd(out.grad)
        grads: dict[str, np.ndarray] = {}
        for name, leaf in self._params.items():
            grads[name] = (
                leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            )
        self._steps.clear()
        self._consumed = True
        return grads


# ---------------------------------------------------------------------------
# primitive plumbing


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractViolation("inputs belong to different tapes")
    return tape


def _accum(t, g: np.ndarray) -> None:
    # Copy on first write: g may alias another tensor's grad (views from
    # reshape/broadcast), and grads can be inspected after backward.
    if not isinstance(t, Tensor):
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _emit(tape: Tape | None, out_data: np.ndarray, backward) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericError("kernel produced a non-finite value")
    out = Tensor(out_data, tape=tape)
    if tape is not None:
        tape._record(out, backward)
    return out


def _data(x):
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, (int, float)):
        return x  # weak scalar: keeps the other operand's dtype
    return np.asarray(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    out = ad + bd

    def backward(g):
        _accum(a, _unbroadcast(g, np.shape(ad)))
        _accum(b, _unbroadcast(g, np.shape(bd)))

    return _emit(tape, out, backward)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    out = ad - bd

    def backward(g):
        _accum(a, _unbroadcast(g, np.shape(ad)))
        _accum(b, _unbroadcast(-g, np.shape(bd)))

    return _emit(tape, out, backward)


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    out = ad * bd

    def backward(g):
        _accum(a, _unbroadcast(g * bd, np.shape(ad)))
        _accum(b, _unbroadcast(g * ad, np.shape(bd)))

    return _emit(tape, out, backward)


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # One flat GEMM instead of a batch loop when the rhs is a plain matrix.
    if x.ndim > 2 and y.ndim == 2:
        lead = x.shape[:-1]
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(lead + (y.shape[-1],))
    return x @ y


def matmul(a, b) -> Tensor:
    """Matrix product with numpy stacking semantics on leading axes."""
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ContractViolation("matmul operands must have at least 2 dims")
    if ad.shape[-1] != bd.shape[-2]:
        raise ContractViolation(
            f"matmul inner extents differ: {ad.shape} x {bd.shape}"
        )
    out = _mm(ad, bd)

    def backward(g):
        _accum(a, _unbroadcast(_mm(g, bd.swapaxes(-1, -2)), ad.shape))
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            _accum(b, gb)
        else:
            _accum(b, _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape))

    return _emit(tape, out, backward)


def gelu(a) -> Tensor:
    """Tanh-approximation GELU (smooth, so finite differences stay clean)."""
    tape = _tape_of(a)
    x = _data(a)
    x2 = x * x
    inner = x2 * _GELU_C
    inner += 1.0
    inner *= x
    inner *= _SQRT_2_OVER_PI
    t = np.tanh(inner)
    t += 1.0  # t now holds 1 + tanh(inner)
    out = 0.5 * x * t

    def backward(g):
        dinner = x2 * (3.0 * _GELU_C)
        dinner += 1.0
        dinner *= _SQRT_2_OVER_PI
        da = t * (2.0 - t)  # (1 + tanh)(1 - tanh)
        da *= x * 0.5
        da *= dinner
        da += 0.5 * t
        _accum(a, g * da)

    return _emit(tape, out, backward)


def tanh(a) -> Tensor:
    tape = _tape_of(a)
    out = np.tanh(_data(a))

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return _emit(tape, out, backward)


def absolute(a) -> Tensor:
    tape = _tape_of(a)
    x = _data(a)
    out = np.abs(x)

    def backward(g):
        _accum(a, g * np.sign(x))

    return _emit(tape, out, backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    tape = _tape_of(a)
    x = _data(a)
    out = x.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, x.shape))

    return _emit(tape, np.asarray(out), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    tape = _tape_of(a)
    x = _data(a)
    out = x.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, x.shape) / count)

    return _emit(tape, np.asarray(out), backward)


def reshape(a, shape) -> Tensor:
    tape = _tape_of(a)
    x = _data(a)
    out = x.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(x.shape))

    return _emit(tape, out, backward)


def transpose(a, axes) -> Tensor:
    tape = _tape_of(a)
    x = _data(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.transpose(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _emit(tape, out, backward)


def concat(parts: Sequence, axis: int) -> Tensor:
    parts = list(parts)
    tape = _tape_of(*parts)
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def backward(g):
        start = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + n)
            _accum(p, g[tuple(idx)])
            start += n

    return _emit(tape, out, backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    tape = _tape_of(a)
    x = _data(a)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x[idx]

    def backward(g):
        full = np.zeros_like(x)
        full[idx] = g
        _accum(a, full)

    return _emit(tape, out, backward)


def take_rows(a, indices) -> Tensor:
    """Gather along axis 0 with an integer index array (embedding lookup)."""
    tape = _tape_of(a)
    x = _data(a)
    idx = np.asarray(indices)
    out = x[idx]

    def backward(g):
        full = np.zeros_like(x)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _emit(tape, out, backward)


def gather_rows(a, indices) -> Tensor:
    """Per-batch row gather: a is (B, M, D), indices (B, K) -> (B, K, D)."""
    tape = _tape_of(a)
    x = _data(a)
    idx = np.asarray(indices)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ContractViolation("gather_rows expects (B, M, D) data and (B, K) indices")
    out = np.take_along_axis(x, idx[:, :, None], axis=1)

    def backward(g):
        full = np.zeros_like(x)
        batch = np.arange(x.shape[0])[:, None]
        np.add.at(full, (batch, idx), g)
        _accum(a, full)

    return _emit(tape, out, backward)


# ---------------------------------------------------------------------------
# attention / normalization primitives


def _check_mask_rows(mask: np.ndarray) -> None:
    if mask.dtype != np.bool_:
        raise ContractViolation("attention mask must be boolean")
    if not mask.any(axis=-1).all():
        rows = np.argwhere(~mask.any(axis=-1))
        raise FullyMaskedRowError(f"fully masked query row(s) at {rows[:4].tolist()}")


def masked_softmax(logits, mask: np.ndarray) -> Tensor:
    """Row softmax over permitted keys; forbidden entries are exactly zero.

    ``mask`` is boolean and broadcastable to ``logits`` over leading axes;
    True marks a permitted key. Stability comes from max-subtraction over
    permitted entries; forbidden logits are replaced by a large negative
    fill before exponentiation and zeroed exactly afterwards. A row with no
    permitted key is a hard error, never a silent NaN.
    """
    tape = _tape_of(logits)
    x = _data(logits)
    mask = np.asarray(mask)
    _check_mask_rows(mask)
    if np.broadcast_shapes(x.shape, mask.shape) != x.shape:
        raise ContractViolation(
            f"mask shape {mask.shape} does not broadcast to logits {x.shape}"
        )
    filled = np.where(mask, x, x.dtype.type(NEG_FILL))
    filled = filled - filled.max(axis=-1, keepdims=True)
    e = np.exp(filled)
    e = np.where(mask, e, x.dtype.type(0.0))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(logits, p * (g - dot))

    return _emit(tape, p, backward)


def layer_norm(a, scale, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale."""
    tape = _tape_of(a, scale)
    x = _data(a)
    s = _data(scale)
    if x.shape[-1] != s.shape[-1] or s.ndim != 1:
        raise ContractViolation("layer_norm scale must be 1-D matching the last axis")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * s

    def backward(g):
        gy = g * s
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (gy - m1 - xhat * m2))
        red = tuple(range(g.ndim - 1))
        _accum(scale, (g * xhat).sum(axis=red))

    return _emit(tape, out, backward)


def constant(array, dtype=None) -> Tensor:
    """Wrap a value that takes no gradient."""
    return Tensor(np.asarray(array, dtype=dtype))
