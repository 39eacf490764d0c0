"""Dense float32 tensors with reverse-mode automatic differentiation.

The graph is built define-by-run: every op that produces a tensor from at
least one grad-requiring input records its parents and a backward closure
on the output. ``backward(loss)`` walks the graph once in reverse
topological order, accumulates ``grad`` on every reachable leaf, then
frees the graph. A second ``backward`` on the same loss raises.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, repeated backward)."""


class NumericError(ArithmeticError):
    """Non-finite values where the operation requires finite input."""


_node_ids = itertools.count()


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    previous = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """A dense float32 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward_rule", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule = None
        self._backward_done = False

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

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions carry the real logic.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_rule) -> Tensor:
    out = Tensor(data)
    if _grad_mode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_rule = backward_rule
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray, fresh: bool = False) -> None:
    """Add ``grad`` into ``tensor.grad``.

    ``fresh`` asserts the rule allocated ``grad`` itself and holds no other
    reference, letting the first store take ownership instead of copying
    (a later second contribution may then mutate it in place).
    """
    if not tensor.requires_grad:
        return
    if tensor.grad is not None:
        tensor.grad += grad
    elif fresh and grad.dtype == np.float32:
        tensor.grad = grad
    else:
        # copy: backward rules may hand us a view of an upstream grad buffer
        tensor.grad = np.array(grad, dtype=np.float32)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def rule(g):
        ga = _unbroadcast(g, a.shape)
        _accumulate(a, ga, fresh=ga is not g)
        gb = _unbroadcast(g, b.shape)
        _accumulate(b, gb, fresh=gb is not g)

    return _make(data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def rule(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape), fresh=True)
        _accumulate(b, _unbroadcast(g * a.data, b.shape), fresh=True)

    return _make(data, (a, b), rule)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = np.float32(factor)
    data = a.data * factor

    def rule(g):
        _accumulate(a, g * factor, fresh=True)

    return _make(data, (a,), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; extra leading axes broadcast as a batch dimension."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def rule(g):
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
                    fresh=True)
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape),
                    fresh=True)

    return _make(data, (a, b), rule)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, np.float32(0.0))

    def rule(g):
        _accumulate(a, g * (data > 0), fresh=True)

    return _make(data, (a,), rule)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

    def rule(g):
        g = np.asarray(g, dtype=np.float32)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).astype(np.float32), fresh=True)

    return _make(data, (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def rule(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(data, (a,), rule)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    data = np.transpose(a.data, axes)

    def rule(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(data, (a,), rule)


def concatenate(tensors: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(index)])

    return _make(data, tuple(tensors), rule)


# ---------------------------------------------------------------------------
# neural-network ops


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Exponent-normalize along ``axis`` using the max-subtraction trick.

    ``mask`` is a boolean array broadcastable to ``a.shape``; False entries
    receive zero probability. Slices with no True entry fall back to a
    uniform distribution, treated as constant in the backward pass.
    """
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")

    if mask is None:
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        exp = np.exp(shifted)
        out = exp / exp.sum(axis=axis, keepdims=True)
        dead = None
    else:
        mask = np.broadcast_to(mask, a.shape)
        neg_inf = np.float32(-np.inf)
        masked = np.where(mask, a.data, neg_inf)
        peak = masked.max(axis=axis, keepdims=True)
        # Fully-masked slices have peak == -inf; zero it so exp() stays finite.
        peak = np.where(np.isneginf(peak), np.float32(0.0), peak)
        exp = np.where(mask, np.exp(masked - peak), np.float32(0.0))
        total = exp.sum(axis=axis, keepdims=True)
        dead = total == 0
        uniform = np.float32(1.0 / a.shape[axis])
        out = np.where(dead, uniform, exp / np.where(dead, np.float32(1.0), total))
    out = out.astype(np.float32)

    def rule(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        grad = out * (g - inner)
        if dead is not None:
            grad = np.where(dead, np.float32(0.0), grad)
        _accumulate(a, grad.astype(np.float32, copy=False), fresh=True)

    return _make(out, (a,), rule)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError(f"layer_norm gain/bias must be ({a.shape[-1]},), got {gain.shape} and {bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True, dtype=np.float32)
    centered = a.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True, dtype=np.float32)
    inv_std = (1.0 / np.sqrt(var + np.float32(eps))).astype(np.float32)
    normed = centered * inv_std
    data = normed * gain.data + bias.data

    def rule(g):
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(bias, g.sum(axis=reduce_axes).astype(np.float32, copy=False), fresh=True)
        _accumulate(gain, (g * normed).sum(axis=reduce_axes).astype(np.float32, copy=False), fresh=True)
        gn = g * gain.data
        grad = inv_std * (
            gn
            - gn.mean(axis=-1, keepdims=True)
            - normed * (gn * normed).mean(axis=-1, keepdims=True)
        )
        _accumulate(a, grad.astype(np.float32, copy=False), fresh=True)

    return _make(data, (a, gain, bias), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ``out[..., :] = table[ids[...], :]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]}) in embedding lookup")
    data = table.data[ids]

    def rule(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        _accumulate(table, grad, fresh=True)

    return _make(data, (table,), rule)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: keep with probability 1-rate, scale kept values."""
    if rate <= 0.0:
        return a
    if not rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.shape, dtype=np.float32) >= rate).astype(np.float32)
    keep /= np.float32(1.0 - rate)
    data = a.data * keep

    def rule(g):
        _accumulate(a, g * keep, fresh=True)

    return _make(data, (a,), rule)


def cross_entropy(logits: Tensor, targets, pad_id: int, label_smoothing: float = 0.0) -> Tensor:
    """Mean smoothed negative log-likelihood over non-pad positions.

    ``logits`` is [positions x vocab]; ``targets`` a same-length id vector.
    Positions whose target equals ``pad_id`` contribute nothing and are
    excluded from the mean. The smoothed target distribution puts
    ``1 - label_smoothing`` on the gold token and spreads ``label_smoothing``
    uniformly over the whole vocabulary.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [positions x vocab] logits, got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {logits.shape[0]}")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    vocab = logits.shape[1]
    nonpad = targets != pad_id
    count = int(nonpad.sum())
    if count == 0:
        raise ValueError("empty loss support: every target position is padding")
    if targets[nonpad].min() < 0 or targets[nonpad].max() >= vocab:
        raise IndexError(f"target id out of range [0, {vocab})")

    x = logits.data
    peak = x.max(axis=1, keepdims=True)
    shifted = x - peak
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + peak
    log_probs = x - log_z

    smooth = np.float32(label_smoothing)
    gold = np.where(nonpad, targets, 0)
    nll = -log_probs[np.arange(len(targets)), gold]
    per_position = (1.0 - smooth) * nll - (smooth / vocab) * log_probs.sum(axis=1)
    loss = np.float32(per_position[nonpad].sum() / count)

    def rule(g):
        probs = np.exp(log_probs)
        target_mass = np.zeros_like(probs)
        target_mass[np.arange(len(targets)), gold] = 1.0 - smooth
        grad = probs - target_mass - smooth / vocab
        grad *= (nonpad / count)[:, None]
        _accumulate(logits, (grad * g).astype(np.float32, copy=False), fresh=True)

    return _make(np.asarray(loss), (logits,), rule)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every grad-requiring ancestor of a scalar loss.

    The graph is freed afterwards; a second call on the same loss raises
    ``GraphError`` rather than silently accumulating.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise GraphError("backward already ran for this loss; rebuild the graph to differentiate again")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.node_id not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_rule is not None and node.grad is not None:
            node._backward_rule(node.grad)
    for node in order:
        if node is not loss:
            node._parents = ()
            node._backward_rule = None
    loss._parents = ()
    loss._backward_rule = None
    loss._backward_done = True
