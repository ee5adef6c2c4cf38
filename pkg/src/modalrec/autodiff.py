"""Reverse-mode automatic differentiation over numpy arrays.

Every trainable quantity in this package lives in a :class:`Tensor`.  Ops
build a computation graph; :func:`backward` walks it in reverse topological
order and accumulates gradients into ``Tensor.grad``.  All arithmetic is
float64.  The graph is rebuilt on every forward pass, so a loss closure can
be called repeatedly (which is what :func:`grad_check` does).

Only the ops this package needs are provided.  Reductions, matmul and the
elementwise ops broadcast like numpy; gradients of broadcast operands are
summed back to the operand shape.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

Array = np.ndarray


class Tensor:
    """An N-d float64 array plus an optional gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, copy=True)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data: Array, parents: tuple[Tensor, ...],
            backward: Callable[[Array], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` over the axes numpy broadcast to reach ``g.shape`` from ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    data = a.data * s

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * s)

    return _result(data, (a,), backward)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-d."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _result(data, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _result(data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * data)

    return _result(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _result(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, a.shape).copy())

    return _result(np.asarray(data), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _result(data, (a,), backward)


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    data = np.swapaxes(a.data, axis1, axis2).copy()

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, np.swapaxes(g, axis1, axis2))

    return _result(data, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(index)])

    return _result(data, tuple(parts), backward)


def gather_rows(a, idx) -> Tensor:
    """Select rows along axis 0: ``out[i] = a[idx[i]]``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def backward(g: Array) -> None:
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accumulate(a, ga)

    return _result(data, (a,), backward)


def scatter_rows(values, idx, n_rows: int) -> Tensor:
    """Add ``values[i]`` into row ``idx[i]`` of a zero matrix with ``n_rows``
    rows; duplicate indices accumulate."""
    values = as_tensor(values)
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((n_rows,) + values.shape[1:])
    np.add.at(data, idx, values.data)

    def backward(g: Array) -> None:
        if values.requires_grad:
            _accumulate(values, g[idx])

    return _result(data, (values,), backward)


def take_pairs(a, rows, cols) -> Tensor:
    """Fancy-index a 2-d tensor: ``out[i] = a[rows[i], cols[i]]``."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    data = a.data[rows, cols].copy()

    def backward(g: Array) -> None:
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, cols), g)
            _accumulate(a, ga)

    return _result(data, (a,), backward)


# ---------------------------------------------------------------------------
# fused numerical ops


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max is subtracted first).

    Inputs must be finite; masking uses large negative finite logits rather
    than infinities so this check stays meaningful.
    """
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        if a.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            _accumulate(a, y * (g - inner))

    return _result(y, (a,), backward)


def logsumexp(a, axis: int = -1) -> Tensor:
    """log(sum(exp(a))) along ``axis`` (axis is removed), stabilised by the max."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("logsumexp input contains non-finite values")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(s), axis=axis)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, np.expand_dims(g, axis) * (e / s))

    return _result(np.asarray(data), (a,), backward)


def layernorm(x, gamma, beta, eps: float = 1e-8) -> Tensor:
    """Layer normalisation over the last axis with learned gain and bias."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gamma.data + beta.data

    def backward(g: Array) -> None:
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _result(data, (x, gamma, beta), backward)


def cross_entropy(logits, target: int) -> Tensor:
    """Negative log-softmax probability of ``target`` for a 1-d logit vector."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects a 1-d logit vector, got {logits.shape}")
    n = logits.shape[0]
    if not -n <= target < n:
        raise IndexError(f"target {target} out of range for {n} classes")
    lse = logsumexp(reshape(logits, (1, n)), axis=-1)
    picked = take_pairs(reshape(logits, (1, n)), [0], [target % n])
    return sum_(sub(lse, picked))


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every tensor the scalar ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    """Adam moment buffers plus hyperparameters; one instance per model."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Apply one Adam update in place using each tensor's accumulated grad.

    A missing grad counts as zero.  The step counter advances once per call.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass(frozen=True)
class GradCheckReport:
    """Worst-case comparison between analytic and central-difference grads."""

    max_rel_err: float
    n_checked: int
    worst: tuple[str, int, float, float] | None  # (name, flat index, analytic, numeric)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               h: float = 1e-5, max_coords_per_tensor: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must rebuild its graph from the live ``params`` tensors on every
    call and must be deterministic.  Each parameter coordinate (or a seeded
    subsample of ``max_coords_per_tensor`` of them) is perturbed by ``+-h``.
    The relative error denominator is floored at 1e-3 so near-zero gradients
    are compared absolutely.
    """
    if h <= 0:
        raise ConfigError(f"step size must be positive, got {h}")
    if max_coords_per_tensor is not None and rng is None:
        rng = np.random.default_rng(0)
    loss = f()
    if loss.data.size != 1:
        raise ShapeError("grad_check target must be scalar")
    if not np.isfinite(loss.data):
        raise NumericError("loss is not finite")
    zero_grads(params)
    backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}
    zero_grads(params)

    max_rel = 0.0
    n_checked = 0
    worst = None
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
            coords = rng.choice(flat.size, size=max_coords_per_tensor, replace=False)
            coords.sort()
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = float(f().data)
            flat[c] = orig - h
            down = float(f().data)
            flat[c] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{c}]")
            numeric = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (name, int(c), float(a), float(numeric))
    return GradCheckReport(max_rel_err=max_rel, n_checked=n_checked, worst=worst)
