"""Reverse-mode tape over dense float64 numpy arrays.

Covers exactly what the toy model needs: matmul, broadcast add/mul,
embedding gather, layer norm, softmax, tanh-GeLU, masked scaled dot-product
attention (composed from primitives), and weighted cross-entropy.  Graphs
are built define-by-run; backward() walks the tape in reverse topological
order and accumulates into .grad of requires_grad leaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LAYERNORM_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "op")

    def __init__(self, data, requires_grad: bool = False, parents=(), op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if (requires_grad and op == "leaf") else None
        self._backward = None
        self._parents = parents
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar used by tests
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def param(shape, rng: np.random.Generator, scale: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _node(data, parents, op) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, parents=parents, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = _node(a.data + b.data, (a, b), "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = _node(a.data * b.data, (a, b), "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = _node(a.data @ b.data, (a, b), "matmul")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    out._backward = backward
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and ids.max() >= table.data.shape[0]:
        raise ValueError(f"token id {int(ids.max())} >= table size {table.data.shape[0]}")
    out = _node(table.data[ids], (table,), "embedding")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    out._backward = backward
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _node(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm")
    d = x.data.shape[-1]

    def backward(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    out._backward = backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _node(p, (x,), "softmax")

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    out._backward = backward
    return out


def gelu(x: Tensor) -> Tensor:
    """tanh approximation"""
    c = np.sqrt(2.0 / np.pi)
    u = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = _node(0.5 * x.data * (1.0 + t), (x,), "gelu")

    def backward(g):
        du = c * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    out._backward = backward
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _node(x.data.reshape(shape), (x,), "reshape")
    out._backward = lambda g: (g.reshape(x.shape),)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    out = _node(np.transpose(x.data, axes), (x,), "transpose")
    inv = np.argsort(axes)
    out._backward = lambda g: (np.transpose(g, inv),)
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over (..., T, d) with additive mask."""
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))), 1.0 / np.sqrt(d))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v)


def cross_entropy_weighted(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """sum_t w_t * (-log softmax(logits_t)[target_t]); zero weight => zero grad."""
    targets = np.asarray(targets).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    flat = logits.data.reshape(-1, logits.data.shape[-1])
    if targets.shape[0] != flat.shape[0]:
        raise ValueError(f"targets length {targets.shape[0]} != positions {flat.shape[0]}")
    if weights.shape[0] != targets.shape[0]:
        raise ValueError("weights length mismatch")
    z = flat - flat.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    nll = -logp[np.arange(flat.shape[0]), targets]
    out = _node(float((weights * nll).sum()), (logits,), "cross_entropy")

    def backward(g):
        p = np.exp(logp)
        p[np.arange(flat.shape[0]), targets] -= 1.0
        gx = (weights[:, None] * p * g).reshape(logits.shape)
        return (gx,)

    out._backward = backward
    return out


def sum_(x: Tensor) -> Tensor:
    out = _node(float(x.data.sum()), (x,), "sum")
    out._backward = lambda g: (np.full(x.shape, g),)
    return out


def topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on all requires_grad leaves; accumulates across calls."""
    if loss.data.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for node in reversed(topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.op == "leaf":
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: int
    failures: list[tuple[tuple[int, ...], float, float, float]] = field(default_factory=list)

    def ok(self, tolerance: float) -> bool:
        return self.checked == 0 or self.max_rel_err < tolerance


def gradient_check(fn, leaf: Tensor, tolerance: float = 1e-4, h: float = 1e-4,
                   max_entries: int = 1000, seed: int = 0) -> GradCheckReport:
    """Compare analytic grads of `fn() -> scalar Tensor` against central differences.

    `fn` must rebuild the graph from current leaf values on every call.
    Entries are subsampled above `max_entries`.  Relative error uses a
    small absolute floor so near-zero gradients do not blow up the ratio.
    """
    if not leaf.requires_grad:
        raise ValueError("leaf must require grad")
    n = leaf.data.size
    if n == 0:
        return GradCheckReport(0.0, 0)
    leaf.zero_grad()
    loss = fn()
    backward(loss)
    analytic = leaf.grad.reshape(-1).copy()

    rng = np.random.default_rng(seed)
    if n > max_entries:
        idxs = rng.choice(n, size=max_entries, replace=False)
    else:
        idxs = np.arange(n)

    flat = leaf.data.reshape(-1)
    report = GradCheckReport(0.0, len(idxs))
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(fn().data)
        flat[i] = orig - h
        f_minus = float(fn().data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        if rel > report.max_rel_err:
            report.max_rel_err = rel
        if rel > tolerance:
            report.failures.append((np.unravel_index(i, leaf.data.shape), a, numeric, rel))
    return report
