"""A small reverse-mode tape over dense feature matrices.

Leaves (parameters, inputs) accumulate gradients in ``.grad`` across calls to
:func:`backward`; intermediate nodes get fresh gradients on every call.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import layers
from .kernel import KernelMap, PoolMap

_ids = itertools.count()


class Value:
    __slots__ = ("data", "grad", "parents", "_backward", "name", "id", "requires_grad")

    def __init__(self, data, parents: Sequence["Value"] = (), backward: Callable | None = None,
                 name: str | None = None, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name
        self.id = next(_ids)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other if isinstance(other, Value) else Value(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Value):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self):
        return total(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.data.shape})"


def parameter(data, name: str | None = None) -> Value:
    return Value(np.array(data), name=name, requires_grad=True)


def _topo_order(root: Value) -> list[Value]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Value) -> None:
    """Propagate d(loss)/d(node) to every leaf that requires a gradient."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads = {loss.id: np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg


# Elementwise and reduction ops.

def add(a: Value, b: Value) -> Value:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return Value(a.data + b.data, (a, b), bw)


def mul(a: Value, b: Value) -> Value:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return Value(a.data * b.data, (a, b), bw)


def scale(a: Value, c: float) -> Value:
    return Value(a.data * c, (a,), lambda g: (g * c,))


def total(a: Value) -> Value:
    return Value(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def relu(x: Value) -> Value:
    return Value(layers.relu_forward(x.data), (x,), lambda g: (layers.relu_backward(g, x.data),))


def linear(x: Value, w: Value, b: Value) -> Value:
    """Row-wise affine map shared across rows."""
    def bw(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)
    return Value(x.data @ w.data + b.data, (x, w, b), bw)


# Sparse layers.

def conv(x: Value, w: Value, b: Value, kmap: KernelMap) -> Value:
    def bw(g):
        return layers.conv_backward(g, x.data, w.data, kmap)
    return Value(layers.conv_forward(x.data, w.data, b.data, kmap), (x, w, b), bw)


def sum_pool(x: Value, pmap: PoolMap) -> Value:
    return Value(layers.sum_pool_forward(x.data, pmap), (x,),
                 lambda g: (layers.sum_pool_backward(g, pmap),))


def sum_unpool(x: Value, pmap: PoolMap) -> Value:
    return Value(layers.sum_unpool(x.data, pmap), (x,),
                 lambda g: (layers.sum_unpool_backward(g, pmap),))


def batch_norm(x: Value, gamma: Value, beta: Value, state: layers.BatchNormParams,
               training: bool = True) -> Value:
    params = layers.BatchNormParams(gamma.data, beta.data, state.running_mean,
                                    state.running_var, state.eps, state.momentum)
    y, cache = layers.batch_norm_forward(x.data, params, training)

    def bw(g):
        return layers.batch_norm_backward(g, gamma.data, cache)
    return Value(y, (x, gamma, beta), bw)


def instance_norm(x: Value, groups: np.ndarray, eps: float = 1e-5) -> Value:
    y, cache = layers.instance_norm_forward(x.data, groups, eps)
    return Value(y, (x,), lambda g: (layers.instance_norm_backward(g, cache),))


def global_avg_pool(x: Value, groups: np.ndarray | None = None) -> Value:
    n = x.shape[0]
    return Value(layers.global_avg_pool(x.data, groups), (x,),
                 lambda g: (layers.global_avg_pool_backward(g, n, groups),))


# Losses.

def _softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check_labels(logits: Value, labels) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    if labels.size != logits.data.size:
        raise ValueError("one label per logit required")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return labels.astype(logits.data.dtype)


def _weighted_bce(logits: Value, y: np.ndarray, weights: np.ndarray) -> Value:
    z = logits.data.reshape(-1)
    per_row = _softplus(z) - y * z
    loss = np.asarray((weights * per_row).sum(), dtype=logits.data.dtype)

    def bw(g):
        return ((g * weights * (sigmoid(z) - y)).reshape(logits.shape),)
    return Value(loss, (logits,), bw)


def cross_entropy(logits: Value, labels) -> Value:
    """Mean binary cross-entropy on logits, in the log-sum-exp stable form."""
    y = _check_labels(logits, labels)
    if y.size == 0:
        raise ValueError("empty input")
    return _weighted_bce(logits, y, np.full(y.size, 1.0 / y.size, dtype=y.dtype))


def balanced_cross_entropy(logits: Value, labels) -> Value:
    """Average of the per-class mean cross-entropies."""
    y = _check_labels(logits, labels)
    if y.size == 0:
        raise ValueError("empty input")
    n_pos = y.sum()
    n_neg = y.size - n_pos
    present = int(n_pos > 0) + int(n_neg > 0)
    w = np.where(y == 1, 1.0 / max(n_pos, 1), 1.0 / max(n_neg, 1)) / present
    return _weighted_bce(logits, y, w.astype(y.dtype))


# Optimisers.

@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    buffers: dict = field(default_factory=dict)


def _check_pairs(params, grads):
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter required")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: shape {p.shape} vs gradient {g.shape}")


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState):
    _check_pairs(params, grads)
    state.step += 1
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.weight_decay:
            g = g + state.weight_decay * p
        if state.momentum:
            buf = state.buffers.get(i)
            buf = g.copy() if buf is None else state.momentum * buf + g
            state.buffers[i] = buf
            g = buf
        p -= state.lr * g
    return params


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState):
    _check_pairs(params, grads)
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.weight_decay:
            g = g + state.weight_decay * p
        m, v = state.buffers.get(i, (np.zeros_like(p), np.zeros_like(p)))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.buffers[i] = (m, v)
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return params


class Optimizer:
    """Applies sgd_step / adam_step to a list of parameter Values."""

    def __init__(self, params: list[Value], state: OptimizerState | None = None):
        self.params = list(params)
        self.state = state or OptimizerState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        data = [p.data for p in self.params]
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        step_fn = {"adam": adam_step, "sgd": sgd_step}[self.state.kind]
        step_fn(data, grads, self.state)
