"""Dense arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array and records the operations applied to
it; calling :meth:`Tensor.backward` on a scalar result replays that record in
reverse topological order, accumulating a gradient into every tensor created
with ``requires_grad=True`` exactly once.

Only the operations the aggregation model needs are provided. All of them
support double precision (the test contract) and work unchanged in single
precision.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy import special

from .errors import DimensionError, NumericError, ValidationError

LAYER_NORM_EPS = 1e-5

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True
_finite_checks = False


@contextmanager
def no_grad():
    """Disable recording inside the block; forward math is unchanged."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def finite_checks():
    """Raise :class:`NumericError` if any op in the block emits NaN/Inf."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = True
    try:
        yield
    finally:
        _finite_checks = prev


class Tensor:
    """A dense multi-axis array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumers",
                 "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._consumers = 0
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    # Sugar used sparingly in model code; the functional forms below are canonical.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        """Backpropagate from a scalar; fills .grad of every reachable parameter."""
        if self.data.size != 1:
            raise DimensionError(f"backward() requires a scalar, got shape {self.data.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, name: str) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{name}'")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
        for p in parents:
            if p.requires_grad:
                p._consumers += 1
    return out


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is not None:
        t.grad += g
    elif t._consumers > 1:
        # More additions will follow; take a private, writable buffer.
        t.grad = np.array(g)
    else:
        # Sole consumer: adopt the array (it is never mutated afterwards).
        t.grad = g if isinstance(g, np.ndarray) else np.asarray(g)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward, "sub")


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


def scale(a, factor: float) -> Tensor:
    a = _wrap(a)

    def backward(g):
        _accum(a, g * factor)

    return _make(a.data * factor, (a,), backward, "scale")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires at least 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner axes differ: {a.data.shape} vs {b.data.shape}")

    if b.ndim == 2:
        # Stack of row blocks against one matrix: a single GEMM.
        k, m = b.data.shape
        a2 = a.data.reshape(-1, k)
        data = (a2 @ b.data).reshape(a.data.shape[:-1] + (m,))

        def backward(g):
            g2 = g.reshape(-1, m)
            _accum(a, (g2 @ b.data.T).reshape(a.data.shape))
            _accum(b, a2.T @ g2)

        return _make(data, (a, b), backward, "matmul")

    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward, "matmul")


def linear(x, w, b=None) -> Tensor:
    """Affine map over the trailing axis: ``y[..., j] = sum_i x[..., i] w[i, j] (+ b[j])``."""
    x, w = _wrap(x), _wrap(w)
    if w.ndim != 2:
        raise DimensionError(f"linear expects a 2-d weight, got {w.data.shape}")
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(
            f"linear: trailing axis of input {x.data.shape} does not match weight {w.data.shape}"
        )
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), w), (w.data.shape[1],))
    else:
        y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.data.shape

    def backward(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def moveaxis(a, source: int, destination: int) -> Tensor:
    a = _wrap(a)
    perm = list(range(a.ndim))
    perm.insert(destination, perm.pop(source))
    return transpose(a, tuple(perm))


def concat(tensors, axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValidationError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(data, tuple(tensors), backward, "concat")


def take_row(a, index: int) -> Tensor:
    """Select one leading-axis row, differentiably (scatter-add on backward)."""
    a = _wrap(a)
    if not 0 <= index < a.data.shape[0]:
        raise ValidationError(f"row index {index} out of range for shape {a.data.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accum(a, full)

    return _make(a.data[index], (a,), backward, "take_row")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(a, axis: int) -> Tensor:
    """Shift-stable softmax along ``axis``; output slices sum to 1."""
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    if a.data.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - inner))

    return _make(y, (a,), backward, "softmax")


def layer_norm(x, gain) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then scale by ``gain``.

    No additive bias; ``gain`` may be any shape broadcastable against the
    normalized input (e.g. one gain vector per attention head).
    """
    x, gain = _wrap(x), _wrap(gain)
    if x.data.shape[-1] < 1:
        raise DimensionError(f"layer_norm needs a non-empty trailing axis, got {x.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv
    y = xhat * gain.data

    def backward(g):
        gy = g * gain.data
        term = gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * term)
        _accum(gain, _unbroadcast(g * xhat, gain.data.shape))

    return _make(y, (x, gain), backward, "layer_norm")


def gelu(a) -> Tensor:
    """Exact-CDF form ``x * Phi(x)`` (no tanh approximation)."""
    a = _wrap(a)
    cdf = special.ndtr(a.data)

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        _accum(a, g * (cdf + a.data * pdf))

    return _make(a.data * cdf, (a,), backward, "gelu")


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - y * y))

    return _make(y, (a,), backward, "tanh")


def dropout(a, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``p == 0``."""
    if rng is None or p <= 0.0:
        return _wrap(a)
    a = _wrap(a)
    draw_dtype = np.float32 if a.data.dtype == np.float32 else np.float64
    keep = (rng.random(a.data.shape, dtype=draw_dtype) >= p).astype(a.data.dtype)
    keep /= np.asarray(1.0 - p, dtype=a.data.dtype)
    return mul(a, Tensor(keep))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax.

    Gradient with respect to the logits is ``(softmax - onehot) / n``.
    """
    logits = _wrap(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n, classes) logits, got {logits.data.shape}")
    n, c = logits.data.shape
    if n < 1:
        raise ValidationError("cross_entropy needs at least one row")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValidationError(f"labels shape {labels.shape} does not match {n} logit rows")
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError(f"labels must lie in [0, {c}), got range "
                              f"[{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    data = np.asarray((lse - picked).mean())

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(n), labels] -= 1.0
        _accum(logits, probs * (float(g) / n))

    return _make(data, (logits,), backward, "cross_entropy")
