"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every operation takes and returns :class:`Tensor`. When a :class:`Tape` is
active and at least one input requires a gradient, the operation appends a
record holding its inputs, its output and a closure mapping the output
adjoint to input adjoints. :func:`backward` replays those records once, in
reverse order.

Operations accept optional leading batch dimensions so that several graphs
with the same node count can be pushed through one call; with no batch
dimension they reduce to the single-graph shapes used throughout the package.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "DimensionError",
    "DegenerateRowError",
    "NonDeterministicError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear_transform",
    "leaky_relu",
    "masked_fill",
    "masked_softmax",
    "concat_pairwise",
    "reshape",
    "take",
    "pool",
    "tensor_sum",
    "tensor_mean",
    "square",
    "sigmoid",
    "log_softmax",
    "cross_entropy",
    "bce_with_logits",
    "backward",
    "grad_check",
    "glorot_uniform",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """Raised when a softmax row has no unmasked entry."""


class NonDeterministicError(RuntimeError):
    """Raised by :func:`grad_check` when two evaluations of ``f`` disagree."""


class Tensor:
    """A dense float64 array with an optional gradient accumulator.

    Parameters
    ----------
    data : array-like
        Values; always copied to a C-contiguous float64 array.
    requires_grad : bool, default=False
        Whether operations on this tensor should be recorded.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._tape: Optional[Tape] = None
        self._is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE: List[Optional["Tape"]] = []


class Tape:
    """Ordered record of executed operations.

    Used as a context manager; operations executed inside it are recorded.
    A tape is single-use with respect to :func:`backward` only in the sense
    that adjoints are recomputed from scratch on every call.
    """

    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.records)

    def leaves(self) -> List[Tensor]:
        seen = {}
        for rec in self.records:
            for x in rec.inputs:
                if x._is_leaf and x.requires_grad:
                    seen.setdefault(id(x), x)
        return list(seen.values())


class no_grad:
    """Context manager that suspends recording on the active tape."""

    def __enter__(self):
        _ACTIVE.append(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    result._tape = None
    result._is_leaf = True
    result.requires_grad = False
    tape = _ACTIVE[-1] if _ACTIVE else None
    if tape is not None and any(x.requires_grad for x in inputs):
        result.requires_grad = True
        result._is_leaf = False
        result._tape = tape
        tape.records.append(_Record(tuple(inputs), result, backward_fn))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _emit(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    x = _as_tensor(x)
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _emit(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _emit(out, (x,), lambda g: (g.reshape(src),))


def take(x: Tensor, key) -> Tensor:
    """Basic (slice) indexing; the adjoint is scattered back into place."""
    x = _as_tensor(x)
    src = x.shape
    out = np.array(x.data[key])

    def bw(g):
        gx = np.zeros(src)
        gx[key] = g
        return (gx,)

    return _emit(out, (x,), bw)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    x = _as_tensor(x)
    src = x.shape
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.full(src, float(g)),))


def tensor_mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    n = max(1, x.size)
    return _emit(np.array(x.data.mean()), (x,), lambda g: (np.full(src, float(g) / n),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(out, (a, b), bw)


def linear_transform(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Row-wise affine map ``y[i] = W @ x[i] (+ b)``.

    ``x`` has shape ``(..., n, d_in)`` (or ``(d_in,)``), ``W`` has shape
    ``(d_out, d_in)`` and ``b`` has shape ``(d_out,)``.
    """
    x, W = _as_tensor(x), _as_tensor(W)
    if W.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"linear_transform: input shape {x.shape} incompatible with weight shape {W.shape}"
        )
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (W.shape[0],):
            raise DimensionError(f"linear_transform: bias shape {b.shape} vs weight shape {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ Wd
        gW = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gW
        return gx, gW, g.reshape(-1, g.shape[-1]).sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return _emit(out, inputs, bw)


def concat_pairwise(u: Tensor, v: Tensor) -> Tensor:
    """Concatenate along the last axis: ``[u ; v]``."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape:
        raise DimensionError(f"concat_pairwise width mismatch: {u.shape} vs {v.shape}")
    d = u.shape[-1]
    out = np.concatenate([u.data, v.data], axis=-1)
    return _emit(out, (u, v), lambda g: (g[..., :d], g[..., d:]))


# ---------------------------------------------------------------------------
# nonlinearities and attention


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """Elementwise ``max(x, slope * x)``; the gradient at exactly 0 is 1."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    x = _as_tensor(x)
    neg = x.data < 0
    out = np.where(neg, slope * x.data, x.data)

    def bw(g):
        return (np.where(neg, slope * g, g),)

    return _emit(out, (x,), bw)


def _mask_array(mask, shape) -> np.ndarray:
    bits = getattr(mask, "bits", mask)
    bits = np.asarray(bits, dtype=bool)
    if bits.shape[-2:] != shape[-2:]:
        raise DimensionError(f"mask shape {bits.shape} does not match scores shape {shape}")
    return bits


def masked_fill(x: Tensor, mask, value: float = -math.inf) -> Tensor:
    """Replace entries where ``mask`` is false by ``value``; no gradient flows there."""
    x = _as_tensor(x)
    bits = _mask_array(mask, x.shape)
    if bits.all():
        return _emit(x.data, (x,), lambda g: (g,))
    out = np.where(bits, x.data, value)
    return _emit(out, (x,), lambda g: (np.where(bits, g, 0.0),))


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Row softmax restricted to entries where ``mask`` is true.

    Masked-out entries are exactly zero. Raises :class:`DegenerateRowError`
    when a row has no true entry.
    """
    scores = _as_tensor(scores)
    bits = _mask_array(mask, scores.shape)
    if not bits.any(axis=-1).all():
        raise DegenerateRowError("masked_softmax: a row of the mask has no true entry")
    dense = bits.all()
    z = scores.data if dense else np.where(bits, scores.data, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    if not dense:
        e[~np.broadcast_to(bits, e.shape)] = 0.0
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (scores,), bw)


def pool(x: Tensor, kind: str = "mean") -> Tensor:
    """Column-wise mean or max over the node axis (second to last).

    Max-pool gradients go to the first row attaining the maximum.
    """
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise DimensionError(f"pool expects (..., n, d), got shape {x.shape}")
    n = x.shape[-2]
    if n == 0:
        raise DimensionError("pool over an empty node set")
    src = x.shape
    if kind == "mean":
        out = x.data.mean(axis=-2)
        return _emit(out, (x,), lambda g: (np.broadcast_to(g[..., None, :] / n, src).copy(),))
    if kind == "max":
        idx = x.data.argmax(axis=-2)
        out = np.take_along_axis(x.data, idx[..., None, :], axis=-2)[..., 0, :]

        def bw(g):
            gx = np.zeros(src)
            np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
            return (gx,)

        return _emit(out, (x,), bw)
    raise ValueError(f"unknown pool kind {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _log_softmax_np(x.data)
    p = np.exp(out)
    return _emit(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, label) -> Tensor:
    """``-log softmax(logits)[label]``.

    ``logits`` of shape ``(k,)`` with an int label, or ``(B, k)`` with ``B``
    labels, in which case the mean over the batch is returned.
    """
    logits = _as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    labels = np.atleast_1d(np.asarray(label)).astype(np.int64)
    k = z2.shape[-1]
    if labels.shape != (z2.shape[0],):
        raise DimensionError(f"cross_entropy: {labels.size} labels for logits of shape {z.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    logp = _log_softmax_np(z2)
    rows = np.arange(z2.shape[0])
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        grad *= float(g) / z2.shape[0]
        return (grad[0] if single else grad,)

    return _emit(np.array(loss), (logits,), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    logits = _as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"bce_with_logits: targets {t.shape} vs logits {logits.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce_with_logits: targets must be binary")
    z = logits.data
    # log(1 + e^z) - t z, written to stay finite for large |z|
    loss = (np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    n = z.size

    def bw(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return ((s - t) * (float(g) / n),)

    return _emit(np.array(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# reverse sweep


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate ``d loss / d x`` into ``x.grad`` for every leaf on the tape.

    Leaves recorded on the tape but not reachable from ``loss`` receive a
    zero gradient.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None:
        raise ValueError("loss was not recorded on any tape")
    for leaf in tape.leaves():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    adjoint = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = adjoint.pop(id(rec.output), None)
        if g is None:
            continue
        grads = rec.backward_fn(g)
        for x, gx in zip(rec.inputs, grads):
            if gx is None or not x.requires_grad:
                continue
            if x._is_leaf:
                x.grad = x.grad + gx if x.grad is not None else np.array(gx, dtype=np.float64)
            else:
                prev = adjoint.get(id(x))
                adjoint[id(x)] = gx if prev is None else prev + gx


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    return_details: bool = False,
):
    """Compare analytic gradients against central differences.

    ``f`` is a zero-argument callable that builds a scalar from the current
    values of ``params``. Returns the maximum over all parameter entries of
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    with no_grad():
        first = f().item()
        second = f().item()
    if first != second:
        raise NonDeterministicError(f"f is not deterministic: {first!r} != {second!r}")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    worst = 0.0
    details = []
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = f().item()
            flat[i] = orig - eps
            with no_grad():
                down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            details.append((p.name, i, a, numeric, err))
            worst = max(worst, err)
    if return_details:
        return worst, details
    return worst


def glorot_uniform(shape: Sequence[int], rng, fan_in: Optional[int] = None, fan_out: Optional[int] = None) -> Tensor:
    """Trainable tensor with entries uniform in ``[-s, s]``, ``s = sqrt(6 / (fan_in + fan_out))``.

    ``rng`` is any object with a ``uniform(low, high)`` method; values are
    drawn in row-major order.
    """
    shape = tuple(int(s) for s in shape)
    if fan_in is None or fan_out is None:
        if len(shape) == 2:
            fan_out, fan_in = shape
        else:
            fan_in = fan_out = shape[0]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape)) if shape else 1
    values = [rng.uniform(-bound, bound) for _ in range(n)]
    return Tensor(np.array(values).reshape(shape), requires_grad=True)
