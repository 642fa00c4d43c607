"""Dense-tensor math with reverse-mode automatic differentiation.

Values are float32 by default; every reduction (matmul, layer norm,
softmax, cross entropy) accumulates in float64 before rounding back, so
results are stable and independent of operand count at desk scale.
Gradients are recorded on an explicit :class:`Tape`: ops executed while a
tape is active append one entry each, and ``tape.backward(loss)`` replays
the entries exactly once in reverse order.

The op set is the closed list the model needs: matmul, elementwise
add/mul/sub, GELU (tanh approximation, the one nonlinearity), layer norm,
softmax / log-softmax, embedding gather, cross entropy, plus the scalar
machinery for policy-gradient objectives (exp, log, clip, minimum,
sum/mean, row gather) and pure data-movement ops (reshape, transpose).
"""

from __future__ import annotations

import math

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class EmptyMaskError(ValueError):
    """Cross entropy was asked to average over zero positions."""


class Tensor:
    """A dense array plus optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar for objective code.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of executed ops; context manager activates recording.

    Entries are appended in execution order, so inputs always precede the
    ops that consume them; backward visits each entry exactly once, in
    reverse.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self._entries.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
        if loss.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {loss.data.shape}")
        if not self._entries:
            if loss.requires_grad:
                _deposit(loss, np.ones_like(loss.data))
            return
        flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        outputs = {id(out) for out, _, _ in self._entries}
        for out, inputs, backward_fn in reversed(self._entries):
            g = flows.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in flows:
                    flows[key] = flows[key] + gi
                else:
                    flows[key] = gi
        # Deposit the accumulated flow into leaf gradient buffers only.
        seen: set[int] = set()
        for _, inputs, _ in self._entries:
            for inp in inputs:
                key = id(inp)
                if key in seen or key in outputs or not inp.requires_grad:
                    continue
                seen.add(key)
                g = flows.get(key)
                if g is not None:
                    _deposit(inp, g)


_ACTIVE: list[Tape] = []


def _deposit(leaf: Tensor, g: np.ndarray) -> None:
    g = g.astype(leaf.data.dtype, copy=False)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _make(out_data, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matmul with float64 accumulation, rounded back to the operand dtype."""
    out_dtype = np.result_type(a.dtype, b.dtype)
    if out_dtype == np.float64:
        return np.matmul(a, b)
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(out_dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched 3-D matrix product (inner extents must match)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or 3-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.data.ndim != b.data.ndim or (a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]):
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    out = _mm(a.data, b.data)

    def backward(g):
        swap = (-1, -2) if a.data.ndim == 3 else None
        at = np.swapaxes(a.data, -1, -2) if swap else a.data.T
        bt = np.swapaxes(b.data, -1, -2) if swap else b.data.T
        return _mm(g, bt), _mm(at, g)

    return _make(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (the model's single nonlinearity)."""
    xd = x.data.astype(np.float64)
    inner = GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = (0.5 * xd * (1.0 + t)).astype(x.data.dtype)

    def backward(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        grad = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
        return (g * grad.astype(g.dtype),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data.astype(np.float64)
    mean = xd.mean(axis=-1, keepdims=True)
    centered = xd - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = centered * inv
    out = (norm * gain.data.astype(np.float64) + bias.data.astype(np.float64)).astype(x.data.dtype)

    def backward(g):
        gd = g.astype(np.float64)
        n = x.data.shape[-1]
        gnorm = gd * gain.data.astype(np.float64)
        # d/dx of (x - mean) * inv with mean/var both functions of x
        gx = inv * (
            gnorm
            - gnorm.mean(axis=-1, keepdims=True)
            - norm * (gnorm * norm).mean(axis=-1, keepdims=True)
        )
        ggain = _unbroadcast(gd * norm, gain.data.shape)
        gbias = _unbroadcast(gd, bias.data.shape)
        return (
            gx.astype(g.dtype),
            ggain.astype(g.dtype),
            gbias.astype(g.dtype),
        )

    return _make(out, (x, gain, bias), backward)


def _softmax64(x: np.ndarray, axis: int) -> np.ndarray:
    xd = x.astype(np.float64)
    xd = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(xd)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rows are nonnegative and sum to one."""
    y64 = _softmax64(x.data, axis)
    out = y64.astype(x.data.dtype)

    def backward(g):
        gd = g.astype(np.float64)
        dot = (gd * y64).sum(axis=axis, keepdims=True)
        return ((y64 * (gd - dot)).astype(g.dtype),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data.astype(np.float64)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out64 = shifted - lse
    out = out64.astype(x.data.dtype)
    probs = np.exp(out64)

    def backward(g):
        gd = g.astype(np.float64)
        return ((gd - probs * gd.sum(axis=axis, keepdims=True)).astype(g.dtype),)

    return _make(out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g.astype(table.data.dtype))
        return (gt,)

    return _make(out, (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[target] over unmasked positions."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    t = logits.data.shape[0]
    if targets.shape != (t,) or mask.shape != (t,):
        raise ShapeError("targets/mask must align with the logits rows")
    if targets.size and targets.max() >= logits.data.shape[1]:
        raise ShapeError("target id out of vocabulary range")
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("cross entropy over an all-masked batch is undefined")
    xd = logits.data.astype(np.float64)
    shifted = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    picked = logp[np.arange(t), targets]
    out = np.asarray(-picked[mask].mean(), dtype=logits.data.dtype)
    probs = np.exp(logp)

    def backward(g):
        gd = float(g)
        grad = probs.copy()
        grad[np.arange(t), targets] -= 1.0
        grad *= mask[:, None] / n * gd
        return (grad.astype(logits.data.dtype),)

    return _make(out, (logits,), backward)


def exp(x: Tensor) -> Tensor:
    out64 = np.exp(x.data.astype(np.float64))
    out = out64.astype(x.data.dtype)

    def backward(g):
        return ((g.astype(np.float64) * out64).astype(g.dtype),)

    return _make(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _make(out, (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where lo <= x <= hi."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(out, (x,), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient follows the smaller operand (ties go to ``a``)."""
    out = np.minimum(a.data, b.data)
    take_a = a.data <= b.data

    def backward(g):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return _make(out, (a, b), backward)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.astype(np.float64).sum(), dtype=x.data.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.data.shape).astype(g.dtype),)

    return _make(out, (x,), backward)


def tmean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.astype(np.float64).mean(), dtype=x.data.dtype)
    n = x.data.size

    def backward(g):
        return ((np.broadcast_to(g, x.data.shape) / n).astype(g.dtype),)

    return _make(out, (x,), backward)


def gather_rows(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """1-D gather out[k] = x[rows[k], cols[k]]; gradient scatter-adds."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = x.data[rows, cols]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g.astype(x.data.dtype))
        return (gx,)

    return _make(out, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    orig = x.data.shape

    def backward(g):
        return (g.reshape(orig),)

    return _make(out, (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(out, (x,), backward)


def assert_finite(value, what: str = "tensor") -> None:
    """Hard error on NaN/Inf at module boundaries."""
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values in {what}")
