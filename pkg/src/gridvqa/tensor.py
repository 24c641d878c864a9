"""Small numpy-backed tensor library with a reverse-mode gradient tape.

Tensors wrap a float array. Operations are plain functions; when a
:class:`Tape` is active they are recorded so that :meth:`Tape.gradient` can
replay them backwards. A :class:`Meter` activated with ``with meter:``
counts matmul FLOPs, encoder passes and the high-water mark of live tensor
elements for the code running inside it.
"""

from __future__ import annotations

import contextlib
import weakref
from contextvars import ContextVar
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
# tanh approximation of GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_C = float(np.sqrt(2.0 / np.pi))
GELU_K = 0.044715


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


_dtype: ContextVar[type] = ContextVar("gridvqa_dtype", default=np.float32)
_tape: ContextVar["Tape | None"] = ContextVar("gridvqa_tape", default=None)
_meter: ContextVar["Meter | None"] = ContextVar("gridvqa_meter", default=None)


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` inside the block (float32 otherwise)."""
    token = _dtype.set(dtype)
    try:
        yield
    finally:
        _dtype.reset(token)


class Meter:
    """Per-call accumulator for FLOPs, encoder passes and live tensor elements."""

    def __init__(self):
        self.flops = 0
        self.passes = 0
        self.live = 0
        self.peak = 0
        self._token = None

    def __enter__(self):
        self._token = _meter.set(self)
        return self

    def __exit__(self, *exc):
        _meter.reset(self._token)
        self._token = None

    def _alloc(self, n: int) -> None:
        self.live += n
        if self.live > self.peak:
            self.peak = self.live

    def _free(self, n: int) -> None:
        self.live -= n


def count_pass(n: int = 1) -> None:
    """Record ``n`` encoder forward passes on the active meter, if any."""
    meter = _meter.get()
    if meter is not None:
        meter.passes += n


class Tensor:
    """A dense array of reals, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "_tracked", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_dtype.get())
        self.requires_grad = requires_grad
        self._tracked = requires_grad
        meter = _meter.get()
        if meter is not None:
            meter._alloc(self.data.size)
            weakref.finalize(self, meter._free, self.data.size)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed operations for reverse-mode differentiation.

    One tape belongs to one training step; it is not safe to record into the
    same tape from several threads.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self):
        self._token = _tape.set(self)
        return self

    def __exit__(self, *exc):
        _tape.reset(self._token)
        self._token = None

    def __len__(self):
        return len(self._records)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` w.r.t. each source, in order.

        Sources the target does not depend on get zeros. The tape is consumed.
        """
        if target.size != 1:
            raise ContractError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp._tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self._records.clear()
        result = []
        for src in sources:
            g = grads.get(id(src))
            result.append(np.zeros_like(src.data) if g is None else g.astype(src.data.dtype, copy=False))
        return result


def _record(out_data, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _tape.get()
    if tape is not None and any(isinstance(t, Tensor) and t._tracked for t in inputs):
        out._tracked = True
        tape._records.append((out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _record(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = GELU_C * (x + GELU_K * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_K * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def index(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    n = len(tensors)
    return _record(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.squeeze(x, axis=axis) for x in np.split(g, n, axis=axis)),
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Counts ``2 * p * q * r`` FLOPs per product on the active meter.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    meter = _meter.get()
    if meter is not None:
        meter.flops += 2 * out.size * ad.shape[-1]

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(out, (a, b), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return _record(out, (a,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (a, gain, bias), vjp)


# ---------------------------------------------------------------- gradient check


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-3,
    dtype=np.float64,
    entries: Sequence[np.ndarray | None] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called with no arguments and must return a scalar tensor built
    from ``params``. The error of one entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. Parameters are
    promoted to ``dtype`` for the duration of the check and restored after.
    ``entries`` optionally limits the check to some flat indices per
    parameter (``None`` means all of that parameter).
    """
    params = list(params)
    if entries is None:
        entries = [None] * len(params)
    if len(entries) != len(params):
        raise ContractError("entries must have one item per parameter")
    saved = [p.data for p in params]
    try:
        with precision(dtype):
            for p in params:
                p.data = p.data.astype(dtype)
            with Tape() as tape:
                loss = f()
            if loss.size != 1:
                raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
            analytic = tape.gradient(loss, params)
            worst = 0.0
            for p, ga, sel in zip(params, analytic, entries):
                flat = p.data.reshape(-1)
                gflat = ga.reshape(-1)
                for i in range(flat.size) if sel is None else np.asarray(sel).ravel():
                    orig = flat[i]
                    flat[i] = orig + step
                    up = f().item()
                    flat[i] = orig - step
                    down = f().item()
                    flat[i] = orig
                    num = (up - down) / (2.0 * step)
                    err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]), abs(num))
                    worst = max(worst, float(err))
            return worst
    finally:
        for p, d in zip(params, saved):
            p.data = d
