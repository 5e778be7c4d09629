"""Small dense-tensor engine with reverse-mode differentiation.

Tensors wrap float64 numpy arrays. Every op applied to a tensor that
requires grad records its parents and a backward closure; :func:`backward`
walks the recorded graph in reverse topological order.

Broadcasting is deliberately limited: elementwise binary ops require equal
shapes, except that a 1-D right operand may be added to the last axis of a
2-D left operand (bias add) and python scalars are accepted anywhere.
Use :func:`expand_rows` for anything else.
"""
from __future__ import annotations

import logging
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- binary ops

def add(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        out = a.data + b

        def bw(g):
            _accumulate(a, g)
        return _node(out, (a,), bw, "add_scalar")
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def bw(g):
            _accumulate(a, g)
            _accumulate(b, g)
        return _node(a.data + b.data, (a, b), bw, "add")
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def bw(g):
            _accumulate(a, g)
            _accumulate(b, g.sum(axis=0))
        return _node(a.data + b.data, (a, b), bw, "bias_add")
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def neg(a):
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, -g)
    return _node(-a.data, (a,), bw, "neg")


def sub(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -b)
    return add(a, neg(as_tensor(b)))


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = float(b)

        def bw(g):
            _accumulate(a, g * c)
        return _node(a.data * c, (a,), bw, "scale")
    b = as_tensor(b)
    _check_same("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)
    return _node(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)
    return _node(a.data @ b.data, (a, b), bw, "matmul")


# ----------------------------------------------------------- structural ops

def concat(tensors: Sequence[Tensor], axis=-1):
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in ts]} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])
    return _node(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw, "concat")


def take(a, idx):
    """Basic (slice / integer) indexing."""
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        _accumulate(a, full)
    return _node(np.array(out, dtype=DTYPE), (a,), bw, "slice")


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def slice_cols(a, start, stop):
    return take(a, (slice(None), slice(start, stop)))


def expand_rows(a, n):
    """(1, k) or (k,) -> (n, k)."""
    a = as_tensor(a)
    row = a.data.reshape(1, -1)

    def bw(g):
        _accumulate(a, g.sum(axis=0).reshape(a.shape))
    return _node(np.repeat(row, n, axis=0), (a,), bw, "expand")


def reshape(a, shape):
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g.reshape(a.shape))
    return _node(a.data.reshape(shape), (a,), bw, "reshape")


# ------------------------------------------------------------ pointwise ops

def sigmoid(a):
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)

    def bw(g):
        _accumulate(a, g * out * (1.0 - out))
    return _node(out, (a,), bw, "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - out * out))
    return _node(out, (a,), bw, "tanh")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out)
    return _node(out, (a,), bw, "exp")


def expm1(a):
    """exp(a) - 1 without cancellation near zero."""
    a = as_tensor(a)
    out = np.expm1(a.data)

    def bw(g):
        _accumulate(a, g * (out + 1.0))
    return _node(out, (a,), bw, "expm1")


def log(a):
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g / a.data)
    return _node(np.log(a.data), (a,), bw, "log")


def square(a):
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, 2.0 * g * a.data)
    return _node(a.data * a.data, (a,), bw, "square")


def clip(a, lo, hi):
    """Clamp; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accumulate(a, g * mask)
    return _node(np.clip(a.data, lo, hi), (a,), bw, "clip")


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return _node(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        _accumulate(a, g - p * g.sum(axis=axis, keepdims=True))
    return _node(out, (a,), bw, "log_softmax")


def log_sigmoid(a):
    """log(sigmoid(x)) computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = -np.logaddexp(0.0, -x)
    s = np.exp(out)

    def bw(g):
        _accumulate(a, g * (1.0 - s))
    return _node(out, (a,), bw, "log_sigmoid")


# -------------------------------------------------------------- reductions

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))
    return _node(out, (a,), bw, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


# ----------------------------------------------------------- stochastic ops

def reparameterize(mu, log_var, eps):
    """z = mu + exp(log_var / 2) * eps with eps held fixed."""
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    _check_same("reparameterize", mu, log_var)
    eps = np.asarray(eps, dtype=DTYPE)
    if eps.shape != mu.shape:
        raise ShapeError(f"reparameterize: noise shape {eps.shape} vs {mu.shape}")
    sigma = np.exp(0.5 * log_var.data)

    def bw(g):
        _accumulate(mu, g)
        _accumulate(log_var, g * eps * sigma * 0.5)
    return _node(mu.data + sigma * eps, (mu, log_var), bw, "reparameterize")


# ----------------------------------------------------------------- backward

def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its parents."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor):
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- optimizer

def adam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update in place.

    ``state`` is a dict holding ``t``, ``m`` and ``v`` (lists aligned with
    ``params``); it is initialised on first use. Returns the indices of
    tensors whose gradient was non-finite (those are left untouched).
    """
    b1, b2 = betas
    if "m" not in state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
    for p, m in zip(params, state["m"]):
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} vs parameter {p.shape}")
    state["t"] += 1
    t = state["t"]
    skipped = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            skipped.append(i)
            continue
        m, v = state["m"][i], state["v"][i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    if skipped:
        logger.warning("adam_step: skipped %d tensor(s) with non-finite gradients", len(skipped))
    return skipped


class Adam:
    def __init__(self, params: Iterable[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state: dict = {}
        self.skipped = 0

    def step(self):
        grads = [p.grad for p in self.params]
        self.skipped += len(adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps))

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -------------------------------------------------------------------- rng

def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams; the parent advances deterministically."""
    return rng.spawn(n)


# ------------------------------------------------------------ verification

def numerical_grad(f: Callable[[], float], t: Tensor, h=1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``t.data``."""
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b, floor=1e-5):
    """||a - b|| / max(||a||, ||b||), the per-tensor gradient-check measure."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(loss_fn: Callable[[], Tensor], params: dict, h=1e-5) -> dict:
    """Compare reverse-mode grads of ``loss_fn()`` against central differences.

    ``loss_fn`` must be deterministic (fix any noise outside it). Returns a
    dict of per-parameter relative errors.
    """
    loss = loss_fn()
    backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    errs = {}
    for k, p in params.items():
        num = numerical_grad(lambda: loss_fn().item(), p, h)
        errs[k] = relative_error(analytic[k], num)
    return errs
