"""A small dense reverse-mode differentiation engine on top of numpy.

Only the primitives needed by the segmentation network and the adaptation
losses are provided. Every tensor is float64; a tape node is recorded when
any input requires a gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class InvalidProbability(ValueError):
    pass


class NotScalar(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name: str = "") -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _make(value, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("non-finite value produced in forward pass")
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    av, bv = a.value, b.value
    return _make(
        av / bv,
        (a, b),
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.value)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _make(np.log(xv), (x,), lambda g: (g / xv,))


# -- reductions and indexing --------------------------------------------------


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.value.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def gather_rows(x, indices) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.value[idx], (x,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def affine(x, W, b=None) -> Tensor:
    """Row-wise ``x @ W + b`` for x of shape (N, d_in), W (d_in, d_out), b (d_out,)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"affine {x.shape} with weight {W.shape}")
    if b is None:
        return matmul(x, W)
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise ShapeMismatch(f"bias {b.shape} for weight {W.shape}")
    xv, Wv = x.value, W.value
    return _make(
        xv @ Wv + b.value,
        (x, W, b),
        lambda g: (g @ Wv.T, xv.T @ g, g.sum(axis=0)),
    )


# -- row-wise normalizations ---------------------------------------------------


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward)


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax of ``logits``."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.value.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeMismatch(f"logits {logits.shape} vs targets {t.shape}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(t)), t] = 1.0
    if weights is not None:
        onehot *= np.asarray(weights, dtype=np.float64)[t][:, None]
        denom = float(onehot.sum())
    else:
        denom = float(len(t))
    ll = log_softmax_rows(logits)
    return mul(tsum(mul(ll, onehot)), -1.0 / denom)


def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit norm; rows with norm below ``eps`` become zero."""
    x = as_tensor(x)
    xv = x.value
    norm = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    live = norm >= eps
    safe = np.where(live, norm, 1.0)
    y = np.where(live, xv / safe, 0.0)

    def backward(g):
        gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(live, gx, 0.0),)

    return _make(y, (x,), backward)


@dataclass
class BatchNormStats:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, width: int) -> "BatchNormStats":
        return cls(np.zeros(width), np.ones(width))


def batch_norm(x, gamma, beta, stats: Optional[BatchNormStats] = None,
               training: bool = True, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Per-feature normalization over rows.

    ``training=True`` normalizes with the batch (biased) statistics and, when
    ``stats`` is given and ``update_stats`` is set, folds them into the running
    estimates. ``training=False`` applies the running estimates as a fixed
    affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.value.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"batch_norm on {x.shape} with gamma {gamma.shape}")
    xv, gv = x.value, gamma.value
    if not training:
        if stats is None:
            raise ValueError("evaluation-mode batch_norm needs running statistics")
        inv = 1.0 / np.sqrt(stats.running_var + eps)
        xhat = (xv - stats.running_mean) * inv
        return _make(
            xhat * gv + beta.value,
            (x, gamma, beta),
            lambda g: (g * gv * inv, (g * xhat).sum(axis=0), g.sum(axis=0)),
        )
    n = xv.shape[0]
    mu = xv.mean(axis=0)
    var = xv.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    if stats is not None and update_stats:
        m = stats.momentum
        unbiased = var * n / max(n - 1, 1)
        stats.running_mean = (1 - m) * stats.running_mean + m * mu
        stats.running_var = (1 - m) * stats.running_var + m * unbiased

    def backward(g):
        gxhat = g * gv
        gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
        return (gx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _make(xhat * gv + beta.value, (x, gamma, beta), backward)


# -- stochastic and structural ops ---------------------------------------------


def dropout(x, p: float, rng: Optional[np.random.Generator], enabled: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so no rescaling is needed at test time."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not enabled or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.value * mask, (x,), lambda g: (g * mask,))


def stop_gradient(x) -> Tensor:
    """Same values, no tape edge: nothing flows back through the result."""
    x = as_tensor(x)
    return Tensor(x.value.copy())


# -- backward pass ---------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> dict:
    """Reverse sweep from a scalar ``loss``.

    Returns a map from each leaf tensor (or each of ``params``) to its
    gradient. Leaves that the loss does not reach get a zero gradient. The
    gradient is also accumulated into ``leaf.grad``.
    """
    if loss.value.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value)
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = node
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = np.asarray(pg, dtype=np.float64)
    result = {}
    targets = list(params) if params is not None else list(leaves.values())
    for t in targets:
        g = grads.get(id(t))
        g = np.zeros_like(t.value) if g is None else g.reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = g
    return result


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params`` without touching ``.grad`` buffers."""
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    g = backward(loss, params)
    out = [g[p] for p in params]
    for p, s in zip(params, saved):
        p.grad = s
    return out


# -- optimizer ---------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState):
    """One in-place Adam update; weight decay enters as an additive L2 gradient."""
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteGradient("refusing to apply a non-finite gradient")
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if len(state.m) != len(params):
        raise ShapeMismatch("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            g = g + state.weight_decay * p.value
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay)

    def step(self, grads: Sequence[np.ndarray]):
        adam_step(self.params, grads, self.state)
