"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every value is a float64 :class:`Tensor`. Operations record their parents and a
closure that maps the output gradient to parent gradients; :func:`backward`
walks the recorded graph in reverse topological order. Only the operations the
recurrent autoencoder needs are provided, including a fused GRU step.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .artifacts import save_npz


class NonFiniteError(FloatingPointError):
    """Raised when a forward operation produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised for invalid graph usage (cycles, stale parameters, reuse)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_versions",
                 "_backward", "_version", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._versions = ()
        self._backward = None
        self._version = 0
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value produced in forward pass")


def _make(data, parents, backward):
    """Create an output node; graph bookkeeping is skipped when no parent needs grad."""
    _check_finite(data)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._versions = tuple(p._version for p in parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.data.ndim != 2:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return g @ b.data.T, a2.T @ g2

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, W, b):
    """``x @ W + b`` over the last axis of ``x``; leading axes are batch axes."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"linear shape mismatch: x{x.shape} W{W.shape} b{b.shape}")

    def bw(g):
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return g @ W.data.T, x2.T @ g2, g2.sum(axis=0)

    return _make(x.data @ W.data + b.data, (x, W, b), bw)


def _sigmoid(v):
    # tanh form: no overflow for large |v|
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def column_sigmoid(x, columns):
    """Sigmoid on the boolean-selected last-axis ``columns``, identity elsewhere."""
    x = as_tensor(x)
    columns = np.asarray(columns, dtype=bool)
    s = _sigmoid(x.data)
    out = np.where(columns, s, x.data)
    deriv = np.where(columns, s * (1.0 - s), 1.0)
    return _make(out, (x,), lambda g: (g * deriv,))


def sum_(x):
    x = as_tensor(x)
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x):
    x = as_tensor(x)
    n = x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def minimum(x, c):
    """Elementwise ``min(x, c)`` for a constant ``c``; gradient flows where ``x < c``."""
    x = as_tensor(x)
    below = x.data < c
    return _make(np.where(below, x.data, c), (x,), lambda g: (g * below,))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def blend(new, old, keep):
    """Per-row select: ``new`` where ``keep`` is true, ``old`` otherwise.

    ``keep`` is a constant boolean vector over the leading axis; used for
    masked recurrent steps over padded sequences.
    """
    new, old = as_tensor(new), as_tensor(old)
    k = np.asarray(keep, dtype=bool).reshape(-1, *([1] * (new.data.ndim - 1)))
    return _make(np.where(k, new.data, old.data), (new, old),
                 lambda g: (g * k, g * ~k))


def mse(pred, target, mask):
    """Mean of squared errors over mask-true elements; an empty mask gives 0."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or mask.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape}, {target.shape}, {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        return _make(np.asarray(0.0), (pred,), lambda g: (np.zeros(pred.shape),))
    diff = np.where(mask, pred.data - target, 0.0)
    return _make(np.asarray((diff * diff).sum() / n), (pred,),
                 lambda g: (float(g) * 2.0 * diff / n,))


# ---------------------------------------------------------------------------
# GRU

def gru_step(x, h, Wx, Wh, bx, bh):
    """One GRU step with reset, update and candidate gates.

    Gate blocks are packed as ``[reset | update | candidate]`` along the last
    axis of ``Wx`` (d_in, 3*d_h), ``Wh`` (d_h, 3*d_h), ``bx`` and ``bh``::

        r = sigmoid(x Wx_r + bx_r + h Wh_r + bh_r)
        u = sigmoid(x Wx_u + bx_u + h Wh_u + bh_u)
        n = tanh(x Wx_n + bx_n + r * (h Wh_n + bh_n))
        h' = (1 - u) * n + u * h
    """
    x, h, Wx, Wh, bx, bh = (as_tensor(t) for t in (x, h, Wx, Wh, bx, bh))
    d_h = h.shape[-1]
    if Wx.shape != (x.shape[-1], 3 * d_h) or Wh.shape != (d_h, 3 * d_h):
        raise ValueError(f"gru_step shape mismatch: x{x.shape} h{h.shape} Wx{Wx.shape} Wh{Wh.shape}")
    gx = x.data @ Wx.data + bx.data
    gh = h.data @ Wh.data + bh.data
    r = _sigmoid(gx[:, :d_h] + gh[:, :d_h])
    u = _sigmoid(gx[:, d_h:2 * d_h] + gh[:, d_h:2 * d_h])
    ghn = gh[:, 2 * d_h:]
    n = np.tanh(gx[:, 2 * d_h:] + r * ghn)
    out = (1.0 - u) * n + u * h.data

    def bw(g):
        dn = g * (1.0 - u)
        du = g * (h.data - n)
        dan = dn * (1.0 - n * n)
        dr = dan * ghn
        dar = dr * r * (1.0 - r)
        daz = du * u * (1.0 - u)
        dgx = np.concatenate([dar, daz, dan], axis=1)
        dgh = np.concatenate([dar, daz, dan * r], axis=1)
        dx = dgx @ Wx.data.T
        dh = g * u + dgh @ Wh.data.T
        return dx, dh, x.data.T @ dgx, h.data.T @ dgh, dgx.sum(axis=0), dgh.sum(axis=0)

    return _make(out, (x, h, Wx, Wh, bx, bh), bw)


# ---------------------------------------------------------------------------
# backward pass

def _toposort(root):
    order, state = [], {}
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        st = state.get(key)
        if st == 2:
            continue
        if st == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack_.append((node, True))
        for p in node._parents:
            if p._consumed:
                raise GraphError("graph reused after a previous backward call")
            if p.requires_grad:
                pst = state.get(id(p))
                if pst == 1:
                    raise GraphError("cycle detected in computation graph")
                if pst is None:
                    stack_.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is released afterwards; a second call on the same loss raises
    :class:`GraphError`, as does a graph built from a parameter that has since
    been updated in place by an optimizer step.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, v in zip(node._parents, node._versions):
            if p.is_leaf and p._version != v:
                raise GraphError(f"parameter {p.name or ''} modified after graph construction")
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg
        node._parents = ()
        node._backward = None
        node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints

def glorot_uniform(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Adam:
    """Adam with decoupled weight decay on weight matrices (not biases).

    Update per parameter ``p`` with gradient ``g``::

        m = b1 m + (1 - b1) g;  v = b2 v + (1 - b2) g^2
        p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)     # wd only if p.ndim >= 2
    """

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update
            p._version += 1


def global_grad_norm(params):
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))


def clip_grad_norm(params, max_norm):
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def save_checkpoint(path, params, meta=None):
    """Write named arrays plus a JSON metadata blob into a single ``.npz``."""
    arrays = {f"param/{k}": np.asarray(p.data if isinstance(p, Tensor) else p)
              for k, p in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    save_npz(path, **arrays)


def load_checkpoint(path):
    with np.load(Path(path)) as f:
        meta = json.loads(bytes(f["__meta__"]).decode())
        params = {k[len("param/"):]: f[k].copy() for k in f.files if k.startswith("param/")}
    return params, meta
