"""Dense tensors with reverse-mode automatic differentiation.

A `Tape` records every primitive executed while active and replays the
records strictly in reverse to accumulate adjoints. Gradients sum when a
tensor fans out to several consumers, which is what parameter sharing
(teacher/student, embedding tables) requires.

Two precision modes are supported through `precision(...)`: float64 for
gradient verification and float32 for training runs. Reductions use a
fixed order so repeated runs are bit-identical.
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from typing import Callable, Sequence

import numpy as np

# Clamp for log / norm of exact zero; documented rather than silently NaN.
EPSILON = 1e-12

_DEFAULT_DTYPE: ContextVar[np.dtype] = ContextVar(
    "graphtok_default_dtype", default=np.dtype(np.float64)
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE.get()


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    token = _DEFAULT_DTYPE.set(np.dtype(dtype))
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


class Tensor:
    """A dense real array plus an optional gradient buffer.

    Floating numpy arrays keep their dtype; lists and scalars take the
    ambient default so training code can run uniformly in float32.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        self.grad = g.copy() if self.grad is None else self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("graphtok_tape", default=None)


class Tape:
    """Ordered record of executed primitives for adjoint replay."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple, Callable]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(output)/d(leaf) into each leaf's `.grad`.

        `output` must be scalar unless an explicit `seed` adjoint of the
        same shape is given. Records are traversed strictly in reverse
        execution order; fan-out adjoints sum.
        """
        if seed is None:
            if output.data.shape != ():
                raise ShapeError(
                    f"backward needs a scalar output, got shape {output.data.shape}"
                )
            seed = np.ones((), dtype=output.data.dtype)
        adjoints: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=output.data.dtype)}
        holders: dict[int, Tensor] = {id(output): output}
        for out, inputs, backward_fn in reversed(self._records):
            g = adjoints.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gi
                else:
                    adjoints[key] = gi
                    holders[key] = inp
        # Whatever survives the sweep was never produced by a record: leaves.
        for key, g in adjoints.items():
            holders[key].accumulate_grad(np.asarray(g))


def _tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record_op(data: np.ndarray, inputs: Sequence, backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it when a tape is active.

    `backward_fn(out_grad)` must return one gradient (or None) per input,
    in order. Exposed so graph modules can define sparse primitives.
    """
    out = Tensor(np.asarray(data))
    tape = _tape()
    if tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    ):
        out.requires_grad = True
        tape._records.append((out, tuple(inputs), backward_fn))
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or default_dtype()), requires_grad=True)


def zero_grads(params) -> None:
    tensors = params.values() if isinstance(params, dict) else params
    for t in tensors:
        t.grad = None


def scatter_add(num_rows: int, ids: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Deterministic row scatter-add (much faster than ufunc.at).

    `values` is [E, ...]; rows accumulate into an [num_rows, ...] output.
    Rows are grouped by a stable sort of `ids` and each group is summed
    with add.reduceat, so the result is a pure function of the inputs.
    """
    ids = np.asarray(ids).reshape(-1)
    tail = values.shape[1:]
    out = np.zeros((num_rows,) + tail, dtype=values.dtype)
    if ids.size == 0:
        return out
    flat = np.ascontiguousarray(values).reshape(ids.size, -1)
    if ids.size > 1 and np.any(ids[1:] < ids[:-1]):
        perm = np.argsort(ids, kind="stable")
        ids = ids[perm]
        flat = flat[perm]
    starts = np.flatnonzero(np.concatenate(([True], ids[1:] != ids[:-1])))
    out.reshape(num_rows, -1)[ids[starts]] = np.add.reduceat(flat, starts, axis=0)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` over the axes numpy broadcast to produce it."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    return record_op(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    return record_op(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    return record_op(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    return record_op(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    """Matrix product; stacked leading dims follow numpy matmul rules."""
    a, b = _binary(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.data.shape} and {b.data.shape} differ")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} incompatible")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return record_op(data, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_op(data, tuple(tensors), backward)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-advanced) indexing with scatter-into-zeros backward."""
    a = as_tensor(a)
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return record_op(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return record_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return record_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def _restore_axes(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    return record_op(
        data, (a,), lambda g: (_restore_axes(g, shape, axis, keepdims).copy(),)
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def backward(g):
        return (_restore_axes(g, shape, axis, keepdims) / count,)

    return record_op(data, (a,), backward)


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    a = as_tensor(a)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y / temperature,)

    return record_op(y, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.shape[-1] != gain.data.shape[-1]:
        raise ShapeError(
            f"layer_norm: feature dim {x.data.shape} vs gain {gain.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        d = x.data.shape[-1]
        dxhat = g * gain.data
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = _unbroadcast(g * xhat, gain.data.shape)
        gbias = _unbroadcast(g, bias.data.shape)
        return gx, ggain, gbias

    return record_op(data, (x, gain, bias), backward)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, slope * a.data)
    return record_op(data, (a,), lambda g: (g * np.where(mask, 1.0, slope),))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    expm = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
    data = np.where(mask, a.data, expm)
    return record_op(data, (a,), lambda g: (g * np.where(mask, 1.0, expm + alpha),))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return record_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return record_op(e, (a,), lambda g: (g * e,))


def log(a: Tensor, eps: float = EPSILON) -> Tensor:
    """Natural log with the argument clamped at `eps` (not silently NaN)."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, eps)
    return record_op(np.log(clamped), (a,), lambda g: (g / clamped,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for real p; fractional p requires a >= 0."""
    a = as_tensor(a)
    data = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return record_op(data, (a,), backward)


def l2_norm(a: Tensor, axis: int = -1, keepdims: bool = False, eps: float = EPSILON) -> Tensor:
    """Euclidean norm along `axis`, clamped below at `eps`."""
    a = as_tensor(a)
    raw = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    clamped = np.maximum(raw, eps)
    data = clamped if keepdims else clamped.reshape(np.squeeze(clamped, axis=axis).shape)
    shape = a.data.shape

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape) * a.data / np.broadcast_to(clamped, shape),)

    return record_op(data, (a,), backward)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Rowwise cosine; zero vectors behave as if their norm were EPSILON."""
    a, b = as_tensor(a), as_tensor(b)
    dot = sum_(mul(a, b), axis=axis)
    return div(dot, mul(l2_norm(a, axis=axis), l2_norm(b, axis=axis)))


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer index; backward scatter-adds."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding_lookup: index out of range for table with {table.data.shape[0]} rows"
        )
    data = table.data[ids]

    def backward(g):
        rows = table.data.shape[0]
        return (scatter_add(rows, ids, g.reshape(-1, table.data.shape[-1])),)

    return record_op(data, (table,), backward)


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of `a` into `num_segments` buckets given by `segment_ids`."""
    a = as_tensor(a)
    segment_ids = np.asarray(segment_ids)
    out = scatter_add(num_segments, segment_ids, a.data)
    return record_op(out, (a,), lambda g: (g[segment_ids],))


def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.data.shape} vs labels {labels.shape}"
        )
    n = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(e.sum(axis=1)))
    data = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def backward(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return (g * grad / n,)

    return record_op(data, (logits,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or rng is None (eval)."""
    a = as_tensor(a)
    if rate <= 0.0 or rng is None:
        return a
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    mask = mask.astype(a.data.dtype)
    return record_op(a.data * mask, (a,), lambda g: (g * mask,))


def grad_check(f: Callable, inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error of tape gradients against central differences.

    `f(*inputs)` must return a scalar Tensor and be deterministic. Inputs
    must be float64; the relative error uses max(|a|, |b|, 1e-8) as
    denominator.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
    with precision(np.float64):
        with Tape() as tape:
            out = f(*inputs)
        if out.data.shape != ():
            raise ValueError(f"grad_check needs a scalar output, got shape {out.data.shape}")
        zero_grads(inputs)
        tape.backward(out)
        worst = 0.0
        for t in inputs:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*inputs).data)
                flat[i] = orig - h
                fm = float(f(*inputs).data)
                flat[i] = orig
                fd = (fp - fm) / (2.0 * h)
                an = float(analytic.reshape(-1)[i])
                denom = max(abs(an), abs(fd), 1e-8)
                worst = max(worst, abs(an - fd) / denom)
    return worst
