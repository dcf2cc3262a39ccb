"""Dense float64 tensors with a reverse-mode tape.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
output records its parents and a closure mapping the output gradient to one
gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order and accumulates into leaf ``.grad`` arrays.

Discrete steps (stop-gradient, the straight-through threshold) route their
constants through a replay log so :func:`finite_diff_check` can hold them
fixed while it perturbs parameters.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_PRECISION = [np.float64]

# tanh approximation of GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

UNIFORM_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


class MaskedRowError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_PRECISION[-1])
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = ""

    # -- construction -----------------------------------------------------

    @staticmethod
    def _node(data, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward ---------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                _unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None,
            )

        return Tensor._node(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                _unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None,
            )

        return Tensor._node(a.data - b.data, (a, b), bw, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
            )

        return Tensor._node(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
            )

        return Tensor._node(a.data / b.data, (a, b), bw, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        a = self
        return Tensor._node(-a.data, (a,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        a = self

        def bw(g):
            return (g * p * a.data ** (p - 1),)

        return Tensor._node(a.data**p, (a,), bw, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self
        fancy = _is_fancy(idx)

        def bw(g):
            full = np.zeros_like(a.data)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return Tensor._node(a.data[idx], (a,), bw, "getitem")

    # -- shape ------------------------------------------------------------

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes):
        a = self
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, i: int, j: int):
        a = self
        return Tensor._node(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise ------------------------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily build tensors in ``dtype`` (float64 by default, float32 for speed runs)."""
    _PRECISION.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _PRECISION.pop()


def current_dtype():
    return _PRECISION[-1]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=current_dtype()), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise functions


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._node(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor._node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return Tensor._node(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return Tensor._node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form with constants ``GELU_C = sqrt(2/pi)`` and ``GELU_A = 0.044715``."""
    v = x.data
    inner = GELU_C * (v + GELU_A * (v * v * v))
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return Tensor._node(y, (x,), bw, "gelu")


def abs_(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return Tensor._node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def maximum(x: Tensor, floor: float) -> Tensor:
    keep = x.data > floor
    return Tensor._node(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,), "maximum")


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data @ b.data, (a, b), bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def gather_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    """Rows ``index`` of the second-to-last axis."""
    idx = np.asarray(index, dtype=np.int64)
    return x[..., idx, :]


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a length-d vector over ``n`` rows."""
    return as_tensor(v).reshape(1, -1) + Tensor(np.zeros((n, 1)))


def scatter(x: Tensor, index: Sequence[int], size: int) -> Tensor:
    """Place ``x`` along the last axis at ``index`` of a zero tensor of length ``size``."""
    idx = np.asarray(index, dtype=np.int64)
    out = np.zeros(x.shape[:-1] + (size,))
    out[..., idx] = x.data
    return Tensor._node(out, (x,), lambda g: (g[..., idx],), "scatter")


def select(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``a`` where ``mask`` else ``b``; untouched entries are copied bitwise."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def bw(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), a.shape) if a.requires_grad else None,
            _unbroadcast(np.where(mask, 0.0, g), b.shape) if b.requires_grad else None,
        )

    return Tensor._node(out, (a, b), bw, "select")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Overwrite entries where ``mask`` is true; those entries get zero gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return Tensor._node(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction; ``-inf`` entries map to exactly 0."""
    v = x.data
    m = v.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise MaskedRowError("softmax row is entirely -inf")
    e = np.exp(v - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._node(y, (x,), bw, "softmax")


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def weighted_softmax(scores: Tensor, weights: Tensor, blocked: np.ndarray | None = None) -> Tensor:
    """``exp(s) * w / sum(exp(s) * w)`` over the last axis.

    With a binary ``weights`` forward value this equals a softmax whose
    zero-weight keys carry ``-inf``, while gradients still reach ``weights``
    (a removed key's gradient is proportional to the mass it would have had).
    ``blocked`` entries (e.g. causal future) are excluded outright.
    """
    scores, weights = as_tensor(scores), as_tensor(weights)
    s = scores.data if blocked is None else np.where(blocked, -np.inf, scores.data)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    num = e * weights.data
    den = num.sum(axis=-1, keepdims=True)
    if np.any(den == 0.0):
        raise MaskedRowError("every key in an attention row is masked")
    p = num / den

    def bw(g):
        dots = (g * p).sum(axis=-1, keepdims=True)
        gs = p * (g - dots) if scores.requires_grad else None
        gw = _unbroadcast(e / den * (g - dots), weights.shape) if weights.requires_grad else None
        return gs, gw

    return Tensor._node(p, (scores, weights), bw, "weighted_softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.data
    m = v.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    y = v - lse
    sm = np.exp(y)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor._node(y, (x,), bw, "log_softmax")


def masked_mean(x: Tensor, mask, axis: int = 0) -> Tensor:
    """Mean of ``x`` over ``axis`` weighting entries by ``mask``."""
    w = as_tensor(mask)
    return (x * w).sum(axis=axis) / w.sum(axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return Tensor._node(y, (x, gain, bias), bw, "layer_norm")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over all leading positions."""
    lp = log_softmax(logits, axis=-1)
    flat = lp.reshape(-1, lp.shape[-1])
    t = np.asarray(targets).reshape(-1)
    picked = flat[np.arange(t.size), t]
    return -picked.mean()


# ---------------------------------------------------------------------------
# stop-gradient and straight-through, with a replay log for finite differences


class _ConstantLog:
    """Records constants produced by non-differentiable steps, or replays them."""

    def __init__(self):
        self.mode = "off"
        self.values: list = []
        self.pos = 0

    def take(self, compute: Callable):
        if self.mode == "off":
            return compute()
        if self.mode == "record":
            v = compute()
            self.values.append(v)
            return v
        v = self.values[self.pos]
        self.pos += 1
        return v


_CONSTANTS = _ConstantLog()


@contextlib.contextmanager
def _constant_mode(mode: str, values: list | None = None):
    prev = (_CONSTANTS.mode, _CONSTANTS.values, _CONSTANTS.pos)
    _CONSTANTS.mode = mode
    _CONSTANTS.values = [] if values is None else values
    _CONSTANTS.pos = 0
    try:
        yield _CONSTANTS.values
    finally:
        _CONSTANTS.mode, _CONSTANTS.values, _CONSTANTS.pos = prev


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(_CONSTANTS.take(lambda: x.data.copy()))


def straight_through(y_soft: Tensor) -> Tensor:
    """Forward ``1[y_soft > 0.5]``; backward passes the gradient of ``y_soft`` unchanged.

    Equivalent to ``indicator - stop_gradient(y_soft) + y_soft`` but the forward
    value is the exact indicator rather than a rounded sum.
    """
    hard, anchor = _CONSTANTS.take(lambda: ((y_soft.data > 0.5).astype(y_soft.data.dtype), y_soft.data.copy()))
    if _CONSTANTS.mode == "replay":
        value = hard - anchor + y_soft.data
    else:
        value = hard
    return Tensor._node(value, (y_soft,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------------------
# randomness


_PURPOSES: dict[str, int] = {}


def _purpose_id(name: str) -> int:
    if name not in _PURPOSES:
        _PURPOSES[name] = zlib.crc32(name.encode("utf-8"))
    return _PURPOSES[name]


class Rng:
    """Seeded PCG64 streams addressed by ``(purpose, *indices)``.

    Each address becomes a ``SeedSequence`` spawn key, so draws for a given
    (seed, step, layer, purpose) never depend on call order elsewhere.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, purpose: str, *indices: int) -> np.random.Generator:
        key = (_purpose_id(purpose),) + tuple(int(i) for i in indices)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))


def logistic_noise(gen: np.random.Generator, shape) -> np.ndarray:
    u = np.clip(gen.random(shape), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return logistic_from_uniform(u)


def logistic_from_uniform(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.log(u) - np.log1p(-u)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` is re-evaluated for every perturbed coordinate. Constants from
    stop-gradient and straight-through steps are recorded at the base point
    and replayed, which makes the tape gradient the exact derivative of the
    replayed function.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with _constant_mode("record") as log_values:
        out = f()
    base = out.item()
    if not np.isfinite(base):
        raise NumericError(f"f is not finite at the base point: {base}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def evaluate() -> float:
        with _constant_mode("replay", log_values):
            v = f().item()
        if not np.isfinite(v):
            raise NumericError(f"f is not finite under perturbation: {v}")
        return v

    worst = 0.0
    for p, ga in zip(params, analytic):
        original = p.data
        flat = original.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += h
            p.data = bumped.reshape(original.shape)
            fp = evaluate()
            bumped[i] = flat[i] - h
            p.data = bumped.reshape(original.shape)
            fm = evaluate()
            p.data = original
            num = (fp - fm) / (2.0 * h)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
