"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is define-by-run: every primitive records its inputs and a
vector-Jacobian closure on the active tape, and ``backward`` walks that tape
once in reverse. Arrays are plain numpy ``float64``; there is no implicit
broadcasting except bias addition over the last axis.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from scipy.special import ndtr

from .errors import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    ParameterError,
)

EPSILON_NORM = 1e-12
LAYER_NORM_EPS = 1e-5

_ids = itertools.count()


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``trainable`` marks leaves that ``backward`` should populate; everything
    else is treated as a constant or an intermediate.
    """

    __slots__ = ("values", "grad", "trainable", "id")

    def __init__(self, values, trainable: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.trainable = bool(trainable)
        self.id = next(_ids)

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, trainable={self.trainable})"

    # Small conveniences; everything routes through the recorded primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class Tape:
    """Ordered record of executed primitives (creation order == topological)."""

    def __init__(self):
        self.records = []  # (out_tensor, parent_tensors, vjp)

    def __len__(self):
        return len(self.records)


_tape = Tape()
_grad_enabled = True


def current_tape() -> Tape:
    return _tape


@contextmanager
def new_tape():
    """Install a fresh tape for the duration of the block."""
    global _tape
    saved = _tape
    _tape = Tape()
    try:
        yield _tape
    finally:
        _tape = saved


@contextmanager
def no_grad():
    """Disable recording; forwards still compute values."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def _record(out: Tensor, parents, vjp):
    if _grad_enabled:
        _tape.records.append((out, tuple(parents), vjp))


def backward(loss: Tensor):
    """Populate ``grad`` on every trainable ancestor of a scalar loss.

    Gradients accumulate into existing ``grad`` buffers (call ``zero_grad``
    between independent passes).
    """
    if loss.values.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads = {loss.id: np.ones_like(loss.values)}
    for out, parents, vjp in reversed(_tape.records):
        g = grads.pop(out.id, None)
        if g is None:
            continue
        for parent, pg in zip(parents, vjp(g)):
            if pg is None:
                continue
            acc = grads.get(parent.id)
            grads[parent.id] = pg if acc is None else acc + pg
    # Flush leaf gradients onto trainable tensors.
    seen = set()
    for out, parents, _ in _tape.records:
        for parent in parents:
            if parent.trainable and parent.id in grads and parent.id not in seen:
                seen.add(parent.id)
                g = grads[parent.id]
                parent.grad = g.copy() if parent.grad is None else parent.grad + g
    if loss.trainable:
        loss.grad = (np.ones_like(loss.values) if loss.grad is None
                     else loss.grad + np.ones_like(loss.values))


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a rank-1 ``b`` broadcasts over the last axis (bias add)."""
    if a.shape == b.shape:
        out = Tensor(a.values + b.values)
        _record(out, (a, b), lambda g: (g, g))
        return out
    if b.values.ndim == 1 and a.shape and a.shape[-1] == b.shape[0]:
        out = Tensor(a.values + b.values)
        axes = tuple(range(a.values.ndim - 1))
        _record(out, (a, b), lambda g: (g, g.sum(axis=axes)))
        return out
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values - b.values)
    _record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values * b.values)
    av, bv = a.values, b.values
    _record(out, (a, b), lambda g: (g * bv, g * av))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.values * c)
    _record(out, (a,), lambda g: (g * c,))
    return out


def mul_const(a: Tensor, const) -> Tensor:
    """Elementwise product with a fixed array (no gradient into the array)."""
    const = np.asarray(const, dtype=np.float64)
    if const.shape != a.shape:
        raise DimensionError(f"mul_const: incompatible shapes {a.shape} and {const.shape}")
    out = Tensor(a.values * const)
    _record(out, (a,), lambda g: (g * const,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes on ``a`` (or both) are supported.

    ``b`` may be a plain 2-D weight shared across the batch, in which case its
    gradient sums over the leading axes.
    """
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions disagree for {a.shape} and {b.shape}")
    out = Tensor(np.matmul(av, bv))

    def vjp(g):
        da = np.matmul(g, np.swapaxes(bv, -1, -2))
        db = np.matmul(np.swapaxes(av, -1, -2), g)
        if bv.ndim == 2 and db.ndim > 2:
            db = db.sum(axis=tuple(range(db.ndim - 2)))
        return da, db

    _record(out, (a, b), vjp)
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.values, axes))
    _record(out, (a,), lambda g: (np.transpose(g, inv),))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.values.shape
    out = Tensor(a.values.reshape(shape))
    _record(out, (a,), lambda g: (g.reshape(orig),))
    return out


def index_select(a: Tensor, axis: int, index: int) -> Tensor:
    """Pick one slice along ``axis`` (the axis is dropped)."""
    out = Tensor(np.take(a.values, index, axis=axis))
    shape = a.values.shape

    def vjp(g):
        da = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        da[tuple(sl)] = g
        return (da,)

    _record(out, (a,), vjp)
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: no operands")
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    sizes = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Broadcast to a larger shape; gradient sums over the broadcast axes."""
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.values, shape).copy())
    ndim_extra = len(shape) - a.values.ndim
    orig = a.values.shape
    reduce_axes = tuple(range(ndim_extra)) + tuple(
        i + ndim_extra for i, n in enumerate(orig) if n == 1 and shape[i + ndim_extra] != 1)

    def vjp(g):
        da = g.sum(axis=reduce_axes) if reduce_axes else g
        return (da.reshape(orig),)

    _record(out, (a,), vjp)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a (vocab, k) table by an integer id array."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ParameterError("embedding_lookup: id out of range")
    out = Tensor(table.values[ids])
    vocab, width = table.shape

    def vjp(g):
        dt = np.zeros((vocab, width))
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, width))
        return (dt,)

    _record(out, (table,), vjp)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.values.sum())
    shape = a.values.shape
    _record(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    if n == 0:
        raise DimensionError("mean_all: empty tensor")
    return scale(sum_all(a), 1.0 / n)


def elementwise_activation(a: Tensor, kind: str) -> Tensor:
    """relu or the exact Gaussian-CDF gelu."""
    if kind == "relu":
        out = Tensor(np.maximum(a.values, 0.0))
        mask = (a.values > 0).astype(np.float64)
        _record(out, (a,), lambda g: (g * mask,))
        return out
    if kind == "gelu":
        x = a.values
        phi = ndtr(x)
        out = Tensor(x * phi)
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        local = phi + x * pdf
        _record(out, (a,), lambda g: (g * local,))
        return out
    raise ParameterError(f"unknown activation kind: {kind!r}")


def relu(a: Tensor) -> Tensor:
    return elementwise_activation(a, "relu")


def gelu(a: Tensor) -> Tensor:
    return elementwise_activation(a, "gelu")


def softmax_rows(a: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise (last axis) softmax of ``a / temperature``, max-subtracted."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = a.values / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner) / temperature,)

    _record(out, (a,), vjp)
    return out


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.values - a.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse)
    s = np.exp(z - lse)
    _record(out, (a,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))
    return out


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    norms = np.linalg.norm(a.values, axis=-1, keepdims=True)
    if np.any(norms < EPSILON_NORM):
        raise DegenerateVectorError(
            f"l2_normalize_rows: row norm below {EPSILON_NORM}")
    y = a.values / norms
    out = Tensor(y)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * inner) / norms,)

    _record(out, (a,), vjp)
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to mean 0, variance 1, then apply gain and bias."""
    n = a.shape[-1] if a.shape else 0
    if n == 0:
        raise DimensionError("layer_norm: empty last dimension")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match width {n}")
    mu = a.values.mean(axis=-1, keepdims=True)
    var = ((a.values - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (a.values - mu) * inv
    out = Tensor(xhat * gain.values + bias.values)
    gv = gain.values
    lead = tuple(range(a.values.ndim - 1))

    def vjp(g):
        gg = g * gv
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx, dgain, dbias

    _record(out, (a, gain, bias), vjp)
    return out


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def grad_check(f, point, step: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps one Tensor to a scalar Tensor. Returns
    max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-12).
    """
    if not (1e-7 <= step <= 1e-4):
        raise ParameterError(f"grad_check step {step} outside [1e-7, 1e-4]")
    point = np.asarray(point, dtype=np.float64)

    with new_tape():
        x = Tensor(point, trainable=True)
        y = f(x)
        if y.values.size != 1:
            raise ContractError(f"grad_check requires scalar f, got shape {y.shape}")
        backward(y)
        analytic = np.zeros_like(point) if x.grad is None else x.grad

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            hi = f(Tensor(point)).item()
            flat[i] = saved - step
            lo = f(Tensor(point)).item()
            flat[i] = saved
            nflat[i] = (hi - lo) / (2.0 * step)

    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0


def random_point(rng: np.random.Generator, shape, min_abs: float = 0.0,
                 scale_: float = 1.0) -> np.ndarray:
    """Sample a normal point; resample coordinates inside the kink band ``min_abs``."""
    x = rng.normal(0.0, scale_, size=shape)
    if min_abs > 0.0:
        while True:
            bad = np.abs(x) < min_abs
            if not bad.any():
                break
            x[bad] = rng.normal(0.0, scale_, size=int(bad.sum()))
    return x
