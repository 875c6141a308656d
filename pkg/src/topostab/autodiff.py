"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations the classifier and its losses need are provided.
Broadcasting is limited to one case: the second operand's shape equals the
trailing part of the first's (bias rows, scalars). Every node records its
parents and a backward rule; :func:`backward` walks them in reverse creation
order, which is a valid topological order because parents are always created
before children.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

_counter = itertools.count()
_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._id = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a single-element root, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    grads = {root._id: np.ones_like(root.data)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# -- elementwise binary ops -------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot matmul shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def spmm(adj: sp.spmatrix, x) -> Tensor:
    """``adj @ x`` for a constant sparse matrix (neighbour aggregation)."""
    x = as_tensor(x)
    if adj.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot aggregate {adj.shape} with {x.shape}")
    adj_t = adj.T.tocsr()
    return _make(np.asarray(adj @ x.data), (x,), lambda g: (np.asarray(adj_t @ g),))


def scatter_add_pool(x, batch_vector: np.ndarray, num_graphs: int) -> Tensor:
    """Sum node rows into their graph slot: out[g] = sum of x[i] with batch[i] == g."""
    x = as_tensor(x)
    batch_vector = np.asarray(batch_vector, dtype=np.int64)
    if len(batch_vector) != x.shape[0]:
        raise ShapeError(f"batch vector length {len(batch_vector)} does not match {x.shape}")
    n = len(batch_vector)
    pool = sp.csr_matrix((np.ones(n), (batch_vector, np.arange(n))), shape=(num_graphs, n))
    return _make(np.asarray(pool @ x.data), (x,), lambda g: (g[batch_vector],))


# -- nonlinearities ----------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def hinge(x) -> Tensor:
    """max(0, x), derivative 0 at x = 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    neg = alpha * np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, neg)
    return _make(out, (x,), lambda g: (g * np.where(pos, 1.0, neg + alpha),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def clamp_min(x, eps: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data > eps
    return _make(np.where(mask, x.data, eps), (x,), lambda g: (g * mask,))


def dropout(x, rate: float, train: bool, rng=None) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0.

    ``rng`` is a numpy Generator or an integer seed.
    """
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# -- reductions and losses -----------------------------------------------------

def sum_(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _make(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n),))


def rowwise_l2(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"rowwise norm needs a matrix, got shape {x.shape}")
    norm = np.sqrt((x.data**2).sum(axis=1))
    safe = np.where(norm > 0, norm, 1.0)
    return _make(norm, (x,), lambda g: (x.data * (g / safe * (norm > 0))[:, None],))


def rowwise_l1(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"rowwise norm needs a matrix, got shape {x.shape}")
    return _make(np.abs(x.data).sum(axis=1), (x,), lambda g: (np.sign(x.data) * g[:, None],))


def nll_from_log_softmax(logp, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row log-probs."""
    logp = as_tensor(logp)
    labels = np.asarray(labels, dtype=np.int64)
    if logp.ndim != 2 or len(labels) != logp.shape[0]:
        raise ShapeError(f"log-probs {logp.shape} do not match labels {labels.shape}")
    if len(labels) and (labels.min() < 0 or labels.max() >= logp.shape[1]):
        raise IndexError(f"label out of range for {logp.shape[1]} classes")
    rows = np.arange(len(labels))
    b = len(labels)

    def bw(g):
        out = np.zeros(logp.shape)
        out[rows, labels] = -g / b
        return (out,)

    return _make(-logp.data[rows, labels].mean(), (logp,), bw)


def cross_entropy(logits, labels) -> Tensor:
    return nll_from_log_softmax(log_softmax(logits), labels)


def kl_divergence(p_log, q_log) -> Tensor:
    """Batch-mean of KL(p || q) with both arguments given as row log-probs."""
    p_log, q_log = as_tensor(p_log), as_tensor(q_log)
    if p_log.shape != q_log.shape or p_log.ndim != 2:
        raise ShapeError(f"KL needs equal matrix shapes, got {p_log.shape} and {q_log.shape}")
    p = np.exp(p_log.data)
    diff = p_log.data - q_log.data
    b = p_log.shape[0]

    def bw(g):
        return g / b * p * (diff + 1.0), -g / b * p

    return _make((p * diff).sum() / b, (p_log, q_log), bw)
