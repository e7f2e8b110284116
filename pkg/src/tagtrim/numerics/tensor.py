"""Reverse-mode differentiation over float64 numpy arrays.

A ``Tensor`` is a thin wrapper around an ndarray. While a ``GradientTape``
is active, every op records a node (inputs + backward closure) onto the
tape; creation order is a topological order, so the backward pass is a
single reverse sweep. With no tape active, ops are plain numpy calls with
zero bookkeeping, which is what evaluation and the finite-difference
oracle run on.

Gradients are computed functionally: ``tape.gradients`` never mutates the
tape or the tensors, so replaying it yields identical results.

A tape is single-writer: do not share one across concurrent forward
passes.
"""

import numpy as np

from ..errors import NumericError
from . import backend
from .ops import LOG_FLOOR

_ACTIVE_TAPE = None


class Tensor:
    """Row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, check=True):
        arr = np.asarray(data, dtype=np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise NumericError("Tensor holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x, check=False)


class GradientTape:
    """Records the op graph of a forward pass for one backward replay.

    Usage::

        with GradientTape() as tape:
            loss = ...
        grads = tape.gradients(loss, params)
    """

    def __init__(self):
        self._nodes = []  # (out, inputs, backward_fn) in creation order

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a GradientTape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, out, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))

    def gradients(self, loss, sources):
        """d(loss)/d(source) for each source tensor, as numpy arrays.

        Sources that the loss does not depend on get zero gradients.
        Pure with respect to the tape: calling twice gives identical
        arrays.
        """
        if loss.data.ndim != 0:
            raise ValueError("gradients expects a scalar loss")
        grad_of = {id(loss): np.ones((), dtype=np.float64)}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = grad_of.get(id(out))
            if g is None:
                continue
            in_grads = backward_fn(g)
            for tensor, tg in zip(inputs, in_grads):
                if tg is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grad_of:
                    grad_of[key] = grad_of[key] + tg
                else:
                    grad_of[key] = tg
        return [
            grad_of.get(id(src), np.zeros_like(src.data)) for src in sources
        ]


def _tape():
    return _ACTIVE_TAPE


def _make(data, inputs, backward_fn):
    tape = _ACTIVE_TAPE
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, check=False)
    if track:
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(a.data * b.data, (a, b), backward)


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")

    def backward(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def reshape(a, shape):
    def backward(g):
        return (g.reshape(a.data.shape),)

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(a.data.transpose(axes), (a,), backward)


def broadcast_to(a, shape):
    def backward(g):
        return (_unbroadcast(g, a.data.shape),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def embedding(table, ids):
    """Row gather from a (V, D) table with integer ids of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError("embedding id out of range")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward)


def sigmoid(a):
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def gelu(a):
    x = a.data

    def backward(g):
        return (backend.gelu_grad(x, g),)

    return _make(backend.gelu(x), (a,), backward)


def add_norm(o, v, gamma, beta, eps):
    """Fused residual add-and-norm: v + gamma * normalize(o) + beta."""
    out, xhat, inv_std = backend.add_norm(o.data, v.data, gamma.data, beta.data, eps)

    def backward(g):
        go, gv, ggamma, gbeta = backend.add_norm_grad(g, xhat, inv_std, gamma.data)
        return go, gv, np.asarray(ggamma).reshape(gamma.data.shape), \
            np.asarray(gbeta).reshape(beta.data.shape)

    return _make(out, (o, v, gamma, beta), backward)


def weighted_softmax(scores, weights):
    """Edge-weighted attention rows: softmax of exp(scores) * weights.

    Differentiates through both the scores and, when they carry gradients,
    the weights (soft learned edges). Rows with no positive weight are a
    caller error.
    """
    alpha, coeff = backend.weighted_softmax(scores.data, weights.data)
    if not np.all(np.isfinite(alpha)):
        raise NumericError("weighted_softmax: a row has no positive weight")

    def backward(g):
        gs, gw = backend.weighted_softmax_grad(g, alpha, coeff)
        return gs, gw

    return _make(alpha, (scores, weights), backward)


def row_softmax(a):
    s = backend.softmax(a.data)

    def backward(g):
        return (backend.softmax_grad(g, s),)

    return _make(s, (a,), backward)


def total(a):
    """Sum of all elements, as a scalar tensor."""

    def backward(g):
        return (np.full(a.data.shape, g, dtype=np.float64),)

    return _make(np.float64(a.data.sum()), (a,), backward)


def minimum(a, b):
    take_a = a.data <= b.data  # ties route to the first operand

    def backward(g):
        return (
            _unbroadcast(np.where(take_a, g, 0.0), a.data.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.data.shape),
        )

    return _make(np.minimum(a.data, b.data), (a, b), backward)


def maximum(a, b):
    take_a = a.data >= b.data

    def backward(g):
        return (
            _unbroadcast(np.where(take_a, g, 0.0), a.data.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.data.shape),
        )

    return _make(np.maximum(a.data, b.data), (a, b), backward)


def masked_cross_entropy(p, labels, mask):
    """Mean over records of the per-record mean token cross-entropy.

    ``p`` is (B, T, K) probabilities, ``labels`` (B, T) int classes in
    1..K, ``mask`` (B, T) with 1 on positions that count. Each record is
    averaged over its own valid positions first, then records are averaged,
    so unequal lengths carry equal weight. Log arguments are clamped at
    ``LOG_FLOOR``.
    """
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=np.float64)
    n_rec = p.data.shape[0]
    idx = np.clip(labels - 1, 0, p.data.shape[-1] - 1)[..., None]
    picked = np.take_along_axis(p.data, idx, axis=-1)[..., 0]
    clamped = np.maximum(picked, LOG_FLOOR)
    per_rec_count = mask.sum(axis=1)
    if np.any(per_rec_count < 1):
        raise ValueError("masked_cross_entropy: a record has no valid positions")
    per_rec = (-np.log(clamped) * mask).sum(axis=1) / per_rec_count
    loss = per_rec.mean()

    def backward(g):
        gpicked = np.where(
            picked > LOG_FLOOR,
            -(mask / (clamped * per_rec_count[:, None] * n_rec)) * g,
            0.0,
        )
        gp = np.zeros_like(p.data)
        np.put_along_axis(gp, idx, gpicked[..., None], axis=-1)
        return (gp,)

    return _make(np.float64(loss), (p,), backward)
