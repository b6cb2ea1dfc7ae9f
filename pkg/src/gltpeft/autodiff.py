"""Reverse-mode automatic differentiation over a small fixed set of primitives.

A graph is built eagerly as operations are applied to :class:`Node` objects
and is discarded after :func:`backward`.  Only first-order gradients are
supported.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .errors import ContractError, GLTError, ShapeError


class Node:
    __slots__ = ("value", "grad", "op", "parents", "name", "_adjoint")

    def __init__(self, value, op="leaf", parents=(), adjoint=None, name=None):
        self.value = value
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.name = name
        self._adjoint = adjoint

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def leaf(value, name=None) -> Node:
    return Node(np.asarray(value, dtype=np.float64), name=name)


constant = leaf


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else leaf(x)


class GraphCycleError(GLTError, RuntimeError):
    pass


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphCycleError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            ps = state.get(id(p))
            if ps == 1:
                raise GraphCycleError("cycle detected in computation graph")
            if ps is None:
                stack.append((p, False))
    return order


def backward(loss: Node) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(node) into every node's ``grad``.

    Returns the gradients of all named leaves; leaves that share a name are
    one parameter, so their gradients are summed.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._adjoint is None:
            continue
        for parent, g in zip(node.parents, node._adjoint(node.grad)):
            if g is not None:
                parent.grad += g
    grads: dict[str, np.ndarray] = {}
    for n in order:
        if n.op == "leaf" and n.name is not None:
            grads[n.name] = grads[n.name] + n.grad if n.name in grads else n.grad
    return grads


# --- primitives -----------------------------------------------------------


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    sa, sb = a.shape, b.shape
    return Node(a.value + b.value, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    sa, sb = a.shape, b.shape
    return Node(a.value - b.value, "sub", (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    """Broadcasting product; used for scalar-node times tensor."""
    a, b = _as_node(a), _as_node(b)
    va, vb = a.value, b.value
    return Node(va * vb, "mul", (a, b), lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


def hadamard(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    va, vb = a.value, b.value
    return Node(T.hadamard(va, vb), "hadamard", (a, b), lambda g: (g * vb, g * va))


def scale(a, c: float) -> Node:
    a = _as_node(a)
    c = float(c)
    return Node(a.value * c, "scale", (a,), lambda g: (g * c,))


def rsub_scalar(c: float, a) -> Node:
    """``c - a`` for a Python scalar ``c``."""
    a = _as_node(a)
    return Node(float(c) - a.value, "rsub", (a,), lambda g: (-g,))


def exp(a) -> Node:
    a = _as_node(a)
    y = T.elem_exp(a.value)
    return Node(y, "exp", (a,), lambda g: (g * y,))


def total(a) -> Node:
    a = _as_node(a)
    shape = a.shape
    return Node(np.asarray(a.value.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


# When a list is installed here, relu() appends its activation pattern; the
# gradient check uses it to spot perturbations that cross a kink.
_relu_patterns: list | None = None


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0
    if _relu_patterns is not None:
        _relu_patterns.append(np.packbits(mask))
    return Node(a.value * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a) -> Node:
    a = _as_node(a)
    y = logistic(a.value)
    return Node(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def logistic(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = a.shape
    return Node(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    va, vb = a.value, b.value
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise ShapeError(f"matmul of shapes {va.shape} and {vb.shape}")
    return Node(va @ vb, "matmul", (a, b), lambda g: (g @ vb.T, va.T @ g))


def mode_product(t, m, mode: int) -> Node:
    t, m = _as_node(t), _as_node(m)
    vt, vm = t.value, m.value
    y = T.mode_product(vt, vm, mode)

    def adjoint(g):
        gt = T.mode_product(g, vm.T, mode)
        gm = T.unfold(g, mode) @ T.unfold(vt, mode).T
        return gt, gm

    return Node(y, "mode_product", (t, m), adjoint)


def conv3d(x, w, stride: int = 1, padding: int = 0) -> Node:
    x, w = _as_node(x), _as_node(w)
    vx, vw = x.value, w.value
    y = T.conv3d(vx, vw, stride, padding)
    return Node(y, "conv3d", (x, w), lambda g: T.conv3d_backward(vx, vw, g, stride, padding))


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Node:
    """Per-sample group normalisation of ``[N, C, ...]`` with per-channel affine.

    Statistics are recomputed every forward pass and differentiated through.
    """
    x, gamma, beta = _as_node(x), _as_node(gamma), _as_node(beta)
    v = x.value
    n, c = v.shape[:2]
    if c % groups:
        raise ShapeError(f"{c} channels cannot be split into {groups} groups")
    grouped = v.reshape(n, groups, -1)
    mean = grouped.mean(axis=2, keepdims=True)
    centred = grouped - mean
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=2, keepdims=True) + eps)
    xhat = (centred * inv_std).reshape(v.shape)
    bshape = (1, c) + (1,) * (v.ndim - 2)
    gv = gamma.value.reshape(bshape)
    y = xhat * gv + beta.value.reshape(bshape)
    reduce_axes = (0,) + tuple(range(2, v.ndim))

    def adjoint(g):
        g_gamma = (g * xhat).sum(axis=reduce_axes)
        g_beta = g.sum(axis=reduce_axes)
        gh = (g * gv).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv_std * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
        return gx.reshape(v.shape), g_gamma, g_beta

    return Node(y, "group_norm", (x, gamma, beta), adjoint)


def global_avg_pool(x) -> Node:
    """``[N, C, D, H, W] -> [N, C]``."""
    x = _as_node(x)
    v = x.value
    spatial = v.shape[2:]
    count = int(np.prod(spatial))

    def adjoint(g):
        return (np.broadcast_to(g.reshape(g.shape + (1,) * len(spatial)) / count, v.shape).copy(),)

    return Node(v.reshape(v.shape[0], v.shape[1], -1).mean(axis=2), "gap", (x,), adjoint)


def dense(x, w, b) -> Node:
    """``[N, F] @ w.T + b`` with ``w`` of shape ``[out, F]``."""
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    vx, vw = x.value, w.value
    return Node(vx @ vw.T + b.value, "dense", (x, w, b), lambda g: (g @ vw, g.T @ vx, g.sum(axis=0)))


def upsample2(x) -> Node:
    """Nearest-neighbour x2 upsampling of the three spatial modes."""
    x = _as_node(x)
    v = x.value
    y = v.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def adjoint(g):
        n, c, d, h, w = v.shape
        return (g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)

    return Node(y, "upsample2", (x,), adjoint)


def concat(xs: Iterable, axis: int = 1) -> Node:
    xs = [_as_node(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    return Node(
        np.concatenate([x.value for x in xs], axis=axis),
        "concat",
        xs,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def bce_with_logits(z, y) -> Node:
    """Mean binary cross-entropy of ``sigmoid(z)`` against labels ``y``."""
    z = _as_node(z)
    zv = z.value
    yv = np.asarray(y, dtype=np.float64).reshape(zv.shape)
    if zv.size == 0:
        raise ContractError("bce_with_logits on empty input")
    n = zv.size
    loss = np.maximum(zv, 0.0) - zv * yv + np.log1p(np.exp(-np.abs(zv)))
    p = logistic(zv)
    return Node(np.asarray(loss.mean()), "bce", (z,), lambda g: (g * (p - yv) / n,))


def dice_loss(z, mask, eps: float = 1e-6) -> Node:
    """Soft Dice loss ``1 - 2 sum(pq) / (sum(p) + sum(q) + eps)`` on ``p = sigmoid(z)``.

    For a batch the loss is the mean over samples (leading mode).
    """
    z = _as_node(z)
    zv = z.value
    q = np.asarray(mask, dtype=np.float64).reshape(zv.shape)
    n = zv.shape[0]
    p = logistic(zv).reshape(n, -1)
    qf = q.reshape(n, -1)
    inter = (p * qf).sum(axis=1)
    denom = p.sum(axis=1) + qf.sum(axis=1) + eps
    loss = np.mean(1.0 - 2.0 * inter / denom)

    def adjoint(g):
        # d/dp of -2 I/D = -2 (q D - I) / D^2
        dp = -2.0 * (qf * denom[:, None] - inter[:, None]) / denom[:, None] ** 2
        return ((g / n) * dp * p * (1.0 - p)).reshape(zv.shape),

    return Node(np.asarray(loss), "dice", (z,), adjoint)


# --- parameters -----------------------------------------------------------


@dataclass
class ParamSet:
    """Named parameter arrays split into trainable and frozen."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    trainable: set[str] = field(default_factory=set)

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self.values:
            raise ContractError(f"duplicate parameter name {name!r}")
        self.values[name] = value
        if trainable:
            self.trainable.add(name)

    def leaves(self) -> dict[str, Node]:
        return {k: Node(v, name=k) for k, v in self.values.items()}

    def frozen(self) -> set[str]:
        return set(self.values) - self.trainable


class Context:
    """Per-forward cache of leaf nodes so shared parameters map to one node."""

    def __init__(self):
        self.nodes: dict[str, Node] = {}

    def param(self, name: str, value: np.ndarray) -> Node:
        node = self.nodes.get(name)
        if node is None:
            node = self.nodes[name] = Node(value, name=name)
        return node


def _eval_recording(loss_fn):
    global _relu_patterns
    _relu_patterns = []
    try:
        value = float(loss_fn().value)
        return value, _relu_patterns
    finally:
        _relu_patterns = None


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(
    loss_fn: Callable[[], Node],
    params: ParamSet,
    eps: float = 1e-5,
    *,
    names: Iterable[str] | None = None,
    max_coords: int | None = 64,
    seed: int = 0,
    floor: float = 1e-8,
    skip_kinks: bool = False,
    stats: dict | None = None,
    value_fn: Callable[[str], Callable[[], Node]] | None = None,
) -> float:
    """Max relative error between backward() and central differences.

    ``loss_fn`` must build its graph from ``params.values`` (arrays are
    perturbed in place and restored) and return a scalar node whose leaves
    carry the parameter names.  Parameters with more than ``max_coords``
    entries are checked on a seeded random subsample of coordinates.

    With ``skip_kinks`` a coordinate is left out when some ReLU changes its
    activation pattern between ``theta - eps`` and ``theta + eps``: the loss
    is not differentiable on that segment, so the central difference is no
    oracle there.  Skipped coordinates are listed in ``stats["kinks"]`` as
    ``(name, flat_index)``; ``stats["checked"]`` counts the rest.

    ``value_fn(name)``, when given, returns the loss used for the perturbed
    evaluations of ``name``.  It must compute the same function as
    ``loss_fn``; it exists so callers can precompute the parts of the graph
    that do not depend on ``name``.
    """
    rng = np.random.default_rng(seed)
    grads = backward(loss_fn())
    worst = 0.0
    checked, kinks = 0, []
    evaluate = _eval_recording if skip_kinks else (lambda fn: (float(fn().value), None))
    for name in names if names is not None else sorted(params.trainable):
        value = params.values[name]
        analytic = grads.get(name, np.zeros_like(value)).reshape(-1)
        flat = value.reshape(-1)
        fn = loss_fn if value_fn is None else value_fn(name)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus, pat_plus = evaluate(fn)
            flat[i] = orig - eps
            f_minus, pat_minus = evaluate(fn)
            flat[i] = orig
            if skip_kinks and not _same_pattern(pat_plus, pat_minus):
                kinks.append((name, int(i)))
                continue
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            checked += 1
    if stats is not None:
        stats["checked"] = checked
        stats["kinks"] = kinks
    return worst
