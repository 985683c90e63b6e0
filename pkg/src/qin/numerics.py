"""Dense array math with a small define-by-run reverse-mode autodiff.

Values are numpy arrays. Matrices are 2-D; a leading batch axis is allowed
for the attention products so a minibatch of candidate sequences runs as a
single stacked product instead of a Python loop. ``Node`` wraps a value and
accumulates its gradient when :func:`backward` is called on a scalar loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractViolation(ValueError):
    """An operation was called outside its precondition."""


class Node:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, dtype={self.value.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(value, name=None) -> Node:
    return Node(value, requires_grad=True, name=name)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _accumulate(node: Node, g):
    if not node.requires_grad:
        return
    # gradients are never updated in place, so views may be stored as-is
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value, parents, backward_fn):
    out = Node(value, parents, backward_fn)
    if not out.requires_grad:
        out.parents = ()
        out._backward = None
    return out


def backward(loss: Node):
    """Reverse-mode sweep from a scalar ``loss``.

    Every node reachable from ``loss`` that requires a gradient ends with a
    ``grad`` of its own shape; leaves that are not on any path keep zeros.
    """
    if loss.value.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node.grad is None:
            node.zero_grad()


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    if av.ndim == 3 and bv.ndim == 3 and av.shape[0] != bv.shape[0]:
        raise DimensionError(f"matmul batch mismatch: {av.shape} x {bv.shape}")
    if av.ndim > 3 or bv.ndim > 3 or (av.ndim == 2 and bv.ndim == 3):
        raise DimensionError(f"matmul supports 2-D or batch-major 3-D operands: {av.shape} x {bv.shape}")

    if av.ndim == 3 and bv.ndim == 2:
        n, r, k = av.shape
        value = (av.reshape(n * r, k) @ bv).reshape(n, r, bv.shape[1])
    else:
        value = av @ bv

    def grad_fn(g):
        g = np.ascontiguousarray(g)
        if av.ndim == 3 and bv.ndim == 2:
            n, r, k = av.shape
            if a.requires_grad:
                _accumulate(a, (g.reshape(n * r, -1) @ bv.T).reshape(av.shape))
            if b.requires_grad:
                _accumulate(b, av.reshape(n * r, k).T @ g.reshape(n * r, -1))
            return
        # contiguous transposes keep the batched kernels fast
        if a.requires_grad:
            _accumulate(a, g @ np.ascontiguousarray(np.swapaxes(bv, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.ascontiguousarray(np.swapaxes(av, -1, -2)) @ g)

    return _make(value, (a, b), grad_fn)


def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    value = a.value + b.value

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return _make(value, (a, b), grad_fn)


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    value = a.value - b.value

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(-g, b.value.shape))

    return _make(value, (a, b), grad_fn)


def mul(a, b) -> Node:
    """Element-wise product with numpy broadcasting."""
    a, b = constant(a), constant(b)
    value = a.value * b.value

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(value, (a, b), grad_fn)


def scale(a, c: float) -> Node:
    a = constant(a)
    value = a.value * c

    def grad_fn(g):
        _accumulate(a, g * c)

    return _make(value, (a,), grad_fn)


def transpose(a) -> Node:
    """Swap the last two axes."""
    a = constant(a)

    def grad_fn(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.value, -1, -2), (a,), grad_fn)


def reshape(a, shape) -> Node:
    a = constant(a)
    old = a.value.shape

    def grad_fn(g):
        _accumulate(a, g.reshape(old))

    return _make(a.value.reshape(shape), (a,), grad_fn)


def concat(nodes: Iterable, axis: int = -1) -> Node:
    nodes = [constant(n) for n in nodes]
    value = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        for n, piece in zip(nodes, np.split(g, splits, axis=axis)):
            _accumulate(n, piece)

    return _make(value, nodes, grad_fn)


def embedding(table: Node, index, padding_idx: int | None = 0) -> Node:
    """Row lookup; the ``padding_idx`` row (if any) never receives gradient."""
    index = np.asarray(index)
    value = np.take(table.value, index, axis=0)

    def grad_fn(g):
        if not table.requires_grad:
            return
        flat_idx = index.reshape(-1)
        flat_g = g.reshape(flat_idx.size, -1)
        rows, cols = table.value.shape
        acc = np.empty_like(table.value)
        for j in range(cols):
            acc[:, j] = np.bincount(flat_idx, weights=flat_g[:, j], minlength=rows)
        if padding_idx is not None:
            acc[padding_idx] = 0
        _accumulate(table, acc)

    return _make(value, (table,), grad_fn)


def relu(x) -> Node:
    x = constant(x)
    on = x.value > 0
    value = np.where(on, x.value, 0).astype(x.value.dtype)

    def grad_fn(g):
        _accumulate(x, g * on)

    return _make(value, (x,), grad_fn)


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Node:
    x = constant(x)
    value = _sigmoid(np.asarray(x.value, dtype=np.result_type(x.value, np.float32)))

    def grad_fn(g):
        _accumulate(x, g * value * (1.0 - value))

    return _make(value, (x,), grad_fn)


def masked_softmax(logits, mask=None, allow_empty: bool = False) -> Node:
    """Softmax over the last axis restricted to ``mask``-true entries.

    Masked entries come out exactly 0. A row with no live entry is a
    contract violation unless ``allow_empty`` is set, in which case the row
    is all zeros.
    """
    logits = constant(logits)
    v = logits.value
    if mask is None:
        mask = np.ones(v.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not allow_empty and not np.broadcast_to(mask, v.shape).any(axis=-1).all():
        raise ContractViolation("masked_softmax: a row has no unmasked entry")
    neg = np.where(mask, v, -np.inf)
    row_max = neg.max(axis=-1, keepdims=True)
    row_max[~np.isfinite(row_max)] = 0
    e = np.exp(neg - row_max)
    denom = e.sum(axis=-1, keepdims=True)
    denom[denom == 0] = 1
    e /= denom
    value = e.astype(v.dtype, copy=False)

    def grad_fn(g):
        dot = (g * value).sum(axis=-1, keepdims=True)
        _accumulate(logits, value * (g - dot))

    return _make(value, (logits,), grad_fn)


def sum_all(x) -> Node:
    x = constant(x)

    def grad_fn(g):
        _accumulate(x, np.broadcast_to(g, x.value.shape))

    return _make(np.asarray(x.value.sum(), dtype=x.value.dtype), (x,), grad_fn)


def sum_axis(x, axis: int, keepdims: bool = False) -> Node:
    x = constant(x)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.value.shape))

    return _make(x.value.sum(axis=axis, keepdims=keepdims), (x,), grad_fn)


def bce(p, y, eps: float = 1e-7) -> Node:
    """Summed binary cross-entropy with ``p`` clamped to ``[eps, 1 - eps]``."""
    p = constant(p)
    y = np.asarray(y, dtype=p.value.dtype)
    pc = np.clip(p.value, eps, 1.0 - eps)
    value = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum()
    inside = (p.value >= eps) & (p.value <= 1.0 - eps)

    def grad_fn(g):
        _accumulate(p, g * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)))

    return _make(np.asarray(value, dtype=p.value.dtype), (p,), grad_fn)


# ---------------------------------------------------------------------------
# initialisation and optimisation
# ---------------------------------------------------------------------------

def xavier_init(rows: int, cols: int, seed, dtype=np.float32) -> np.ndarray:
    if rows <= 0 or cols <= 0:
        raise ValueError(f"xavier_init needs positive dimensions, got ({rows}, {cols})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for {name!r}: {bad} bad entries at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise DimensionError(f"adam: {name} param {p.shape} vs grad {g.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(model, loss_fn: Callable, sample, h: float = 1e-4) -> float:
    """Compare backward-pass gradients with central differences.

    ``model.params`` maps names to float64 parameter nodes and
    ``loss_fn(model, sample)`` returns a scalar ``Node``. Entries flagged in
    the optional ``model.frozen`` (name -> boolean mask) are skipped. The
    result is the maximum over parameter tensors of
    ||fd - g|| / max(||g||, 1e-8).
    """
    params = model.params
    frozen = getattr(model, "frozen", {}) or {}
    for p in params.values():
        if p.value.dtype != np.float64:
            raise ContractViolation("finite_diff_check requires float64 parameters")
    loss = loss_fn(model, sample)
    backward(loss)
    analytic = {k: (np.zeros_like(p.value) if p.grad is None else np.array(p.grad)) for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        fd = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        out = fd.reshape(-1)
        skip = np.broadcast_to(frozen.get(name, False), p.value.shape).reshape(-1)
        g = np.where(skip.reshape(p.value.shape), 0.0, analytic[name])
        for j in range(flat.size):
            if skip[j]:
                continue
            orig = flat[j]
            flat[j] = orig + h
            up = float(loss_fn(model, sample).value)
            flat[j] = orig - h
            down = float(loss_fn(model, sample).value)
            flat[j] = orig
            out[j] = (up - down) / (2 * h)
        err = np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-8)
        worst = max(worst, float(err))
    return worst
