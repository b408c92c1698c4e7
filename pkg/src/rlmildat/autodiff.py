"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op returns a :class:`Value` whose backward rule maps the upstream
gradient to one contribution per parent. :func:`backward` computes fresh
adjoints for the whole graph and then *adds* them into each node's
``grad``, so calling it twice on the same graph doubles every gradient.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    EmptyBagError,
    LabelError,
    NumericError,
    ParameterError,
    ShapeError,
)

GROUPS = ("task", "encoder", "actor", "domain")

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build values without recording parents (inference / reward evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Value:
    __slots__ = ("data", "_grad", "parents", "_backward", "op")

    def __init__(self, data, parents=(), backward=None, op=""):
        self.data = np.array(data, dtype=np.float64)
        self._grad = None
        if _grad_enabled:
            self.parents = tuple(parents)
            self._backward = backward
        else:
            self.parents = ()
            self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def grad(self):
        # allocated on first touch; always the shape of data
        if self._grad is None or self._grad.shape != self.data.shape:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = np.asarray(value, dtype=np.float64)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, op={self.op!r})"

    def zero_grad(self):
        self._grad = None

    def detach(self):
        return Value(self.data.copy(), op="detach")

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def _lift(x):
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(x, op):
    if np.isnan(x).any():
        raise NumericError(f"{op}: NaN in input")


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return Value(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def neg(a):
    return Value(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return Value(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)),
        "mul",
    )


def matmul(a, b):
    """Matrix product; 1-D operands follow numpy's vector conventions."""
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.shape[-1] != bd.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}")

    def backward(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return Value(ad @ bd, (a, b), backward, "matmul")


def sum(a, axis=None):  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Value(a.data.sum(axis=axis), (a,), backward, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def stack(values):
    """Stack same-shape values along a new leading axis."""
    values = [_lift(v) for v in values]
    return Value(
        np.stack([v.data for v in values]),
        values,
        lambda g: tuple(g[i] for i in range(len(values))),
        "stack",
    )


def take(a, idx, axis=0):
    idx = np.asarray(idx) if not isinstance(idx, (int, np.integer)) else idx
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        view = np.moveaxis(out, axis, 0)
        if isinstance(idx, (int, np.integer)):
            view[idx] += g
        else:
            np.add.at(view, idx, np.moveaxis(g, axis, 0) if axis else g)
        return (out,)

    return Value(np.take(a.data, idx, axis=axis), (a,), backward, "take")


# ------------------------------------------------------------- elementwise


def relu(x):
    _check_finite(x.data, "relu")
    on = x.data > 0
    return Value(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def tanh(x):
    t = np.tanh(x.data)
    return Value(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def sigmoid(x):
    s = _sigmoid(x.data)
    return Value(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid(x):
    """log(sigmoid(x)) = -softplus(-x), evaluated without overflow."""
    z = x.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid(z)
    return Value(out, (x,), lambda g: (g * (1.0 - s),), "log_sigmoid")


def log(x):
    d = x.data
    return Value(np.log(d), (x,), lambda g: (g / d,), "log")


def exp(x):
    e = np.exp(x.data)
    return Value(e, (x,), lambda g: (g * e,), "exp")


def bernoulli_entropy(p):
    """Elementwise entropy of Bernoulli(p) in nats, with 0·log 0 = 0."""
    d = p.data
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(_xlogx(d) + _xlogx(1.0 - d))
        dh = np.where((d > 0) & (d < 1), np.log1p(-d) - np.log(d), 0.0)
    return Value(h, (p,), lambda g: (g * dh,), "bernoulli_entropy")


def _xlogx(x):
    return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)


# ------------------------------------------------------------ normalisers


def softmax(x, axis=-1):
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Value(s, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Value(out, (x,), backward, "log_softmax")


def logsumexp(x):
    """Log-sum-exp over all entries of ``x``; scalar output."""
    m = x.data.max()
    e = np.exp(x.data - m)
    tot = e.sum()
    w = e / tot
    return Value(m + np.log(tot), (x,), lambda g: (g * w,), "logsumexp")


def masked_softmax(x, mask):
    """Softmax of a 1-D score vector restricted to ``mask == 1``; masked entries get 0."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise EmptyBagError("masked_softmax: mask has no ones")
    _check_finite(x.data[mask], "masked_softmax")
    z = np.where(mask, x.data, -np.inf)
    z = z - z[mask].max()
    e = np.where(mask, np.exp(z), 0.0)
    s = e / e.sum()

    def backward(g):
        return (s * (g - (g * s).sum()),)

    return Value(s, (x,), backward, "masked_softmax")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    if logits.data.ndim == 1:
        logits_2d = Value(logits.data[None, :], (logits,), lambda g: (g[0],), "row")
    else:
        logits_2d = logits
    n, c = logits_2d.shape
    targets = np.atleast_1d(np.asarray(targets))
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but {targets.shape[0]} targets")
    for row, t in enumerate(targets):
        if not 0 <= t < c:
            raise LabelError(f"cross_entropy: target {t} out of range [0, {c}) at row {row}")
    lsm = log_softmax(logits_2d, axis=1)
    picked = Value(
        lsm.data[np.arange(n), targets],
        (lsm,),
        lambda g: (_scatter_rows(g, targets, (n, c)),),
        "pick",
    )
    return mul(sum(picked), -1.0 / n)


def _scatter_rows(g, targets, shape):
    out = np.zeros(shape)
    out[np.arange(shape[0]), targets] = g
    return out


# -------------------------------------------------------- masked reductions


def _check_mask(x, mask, op):
    mask = np.asarray(mask).astype(bool)
    if x.data.ndim != 2 or mask.shape != (x.shape[0],):
        raise ShapeError(f"{op}: mask shape {mask.shape} does not match rows of {x.shape}")
    if not mask.any():
        raise EmptyBagError(f"{op}: all-zero mask (empty bag)")
    return mask


def masked_mean(x, mask):
    mask = _check_mask(x, mask, "masked_mean")
    rows = np.flatnonzero(mask)
    n = len(rows)
    out = x.data[rows].sum(axis=0) / n
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[rows] = g / n
        return (gx,)

    return Value(out, (x,), backward, "masked_mean")


def masked_max(x, mask):
    """Per-dimension max over unmasked rows; gradient goes to the first argmax row."""
    mask = _check_mask(x, mask, "masked_max")
    rows = np.flatnonzero(mask)
    sub = x.data[rows]
    arg = rows[np.argmax(sub, axis=0)]
    cols = np.arange(x.shape[1])
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[arg, cols] = g
        return (gx,)

    return Value(x.data[arg, cols], (x,), backward, "masked_max")


# ------------------------------------------------------- gradient reversal


def grl(x, lam):
    """Identity forward; backward passes ``-lam * upstream`` to ``x``."""
    if not lam >= 0:
        raise ParameterError(f"grl: lambda must be >= 0, got {lam}")
    lam = float(lam)
    return Value(x.data.copy(), (x,), lambda g: (-lam * g,), "grl")


grl_forward = grl


# ---------------------------------------------------------------- engine


def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root, seed=1.0):
    """Accumulate d(seed*root)/d(node) into ``node.grad`` for every reachable node."""
    if root.data.ndim != 0 and root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    adj = {id(root): np.full(root.shape, float(seed))}
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, contrib in zip(node.parents, node._backward(g)):
            k = id(parent)
            if k in adj:
                adj[k] = adj[k] + contrib
            else:
                adj[k] = contrib
    for node in order:
        g = adj.get(id(node))
        if g is not None:
            node.grad += g


# ------------------------------------------------------------- parameters


@dataclass(eq=False)
class Parameter:
    value: Value
    name: str
    group: str

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ConfigError(f"unknown learning-rate group {self.group!r}")

    @property
    def data(self):
        return self.value.data

    @property
    def grad(self):
        return self.value.grad


def reset_gradients(params):
    for p in params:
        p.value.grad[...] = 0.0


def optimizer_step(params, rates):
    """Plain SGD with one learning rate per group, then zero all gradients."""
    params = list(params)
    for p in params:
        if p.group not in rates:
            raise ConfigError(f"no learning rate for group {p.group!r} (parameter {p.name})")
    for p in params:
        p.value.data -= rates[p.group] * p.value.grad
    reset_gradients(params)


def gradcheck(f, inputs, eps=1e-5):
    """Central finite-difference gradients of scalar ``f()`` w.r.t. each array in ``inputs``.

    ``inputs`` are perturbed in place and restored.
    """
    grads = []
    for arr in inputs:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + eps
            hi = float(f())
            arr[i] = orig - eps
            lo = float(f())
            arr[i] = orig
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))))
