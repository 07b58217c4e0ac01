"""Reverse-mode autodiff over dense float64 tensors.

Every primitive records a graph node holding its forward and backward rules.
Values are computed as soon as a node is built and memoized on the output
tensor; ``backward`` walks the graph in reverse topological order (networkx)
and accumulates gradients into leaf tensors until ``zero_grad`` clears them.

The module also carries the small building blocks the transformer modules are
assembled from (Parameter, Module, Linear, LayerNorm, Embedding), the AdamW
optimizer and the warmup / linear-decay learning-rate schedule.
"""

import contextlib
import logging
import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from scipy import special

from meter_desk.exceptions import (
    GradCheckError,
    GraphError,
    IndexRangeError,
    MissingGradError,
    NonFiniteError,
    ParameterGroupError,
    ScheduleError,
    ShapeError,
)

logger = logging.getLogger(__name__)

DTYPE = np.float64
GROUPS = ("bottom", "top")

_state = {"check_finite": True, "grad_enabled": True}


def set_check_barrier(enabled: bool) -> None:
    _state["check_finite"] = bool(enabled)


@contextlib.contextmanager
def check_barrier(enabled: bool = True):
    """Temporarily enable (or disable) the NaN/Inf barrier."""
    previous = _state["check_finite"]
    _state["check_finite"] = bool(enabled)
    try:
        yield
    finally:
        _state["check_finite"] = previous


@contextlib.contextmanager
def no_grad():
    """Build no graph nodes inside the block; results are plain constants."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


class Node:
    __slots__ = ("op", "parents", "forward", "backward", "ctx")

    def __init__(self, op, parents, forward, backward):
        self.op = op
        self.parents = parents
        self.forward = forward
        self.backward = backward
        self.ctx = None


class Tensor:
    """n-dimensional float64 array with a gradient slot and graph linkage."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @classmethod
    def _from_node(cls, node: Node, requires_grad: bool):
        out = cls.__new__(cls)
        out.data = None
        out.requires_grad = requires_grad
        out.grad = None
        out.node = node
        out.name = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", [("tensor", self.shape)])
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise GraphError("only division by a Python scalar is supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _finite_guard(op: str, value: np.ndarray) -> None:
    if _state["check_finite"] and not np.isfinite(value).all():
        raise NonFiniteError(op)


def evaluate(tensor: Tensor) -> Tensor:
    """Return the forward value of ``tensor``, computing and memoizing it if needed."""
    if tensor.data is not None:
        return tensor
    node = tensor.node
    values = [evaluate(p).data for p in node.parents]
    value, ctx = node.forward(*values)
    _finite_guard(node.op, value)
    node.ctx = ctx
    tensor.data = value
    return tensor


def apply_op(op: str, parents, forward, backward) -> Tensor:
    """Record (or, without tracking, just compute) one primitive application.

    ``forward(*parent_values) -> (value, ctx)``;
    ``backward(grad_out, ctx) -> tuple`` with one entry (array or None) per parent.
    """
    parents = tuple(parents)
    tracked = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    if not tracked:
        value, _ = forward(*[p.data for p in parents])
        _finite_guard(op, value)
        out = Tensor.__new__(Tensor)
        out.data = value
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.name = None
        return out
    out = Tensor._from_node(Node(op, parents, forward, backward), requires_grad=True)
    return evaluate(out)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [(a.name or "lhs", a.shape), (b.name or "rhs", b.shape)]) from None


# --- Primitives ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [(a.name or "lhs", a.shape), (b.name or "rhs", b.shape)])
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", [(a.name or "lhs", a.shape), (b.name or "rhs", b.shape)]) from None
    a_shape, b_shape = a.shape, b.shape

    def forward(x, y):
        return np.matmul(x, y), (x, y)

    def backward(g, ctx):
        x, y = ctx
        gx = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), a_shape)
        gy = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), b_shape)
        return gx, gy

    return apply_op("matmul", (a, b), forward, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    a_shape, b_shape = a.shape, b.shape

    def forward(x, y):
        return x + y, None

    def backward(g, ctx):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return apply_op("add", (a, b), forward, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    a_shape, b_shape = a.shape, b.shape

    def forward(x, y):
        return x * y, (x, y)

    def backward(g, ctx):
        x, y = ctx
        return _unbroadcast(g * y, a_shape), _unbroadcast(g * x, b_shape)

    return apply_op("mul", (a, b), forward, backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def forward(x):
        return x * factor, None

    def backward(g, ctx):
        return (g * factor,)

    return apply_op("scale", (as_tensor(a),), forward, backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", [(a.name or "input", a.shape)])
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", [(a.name or "input", a.shape), ("axes", axes)])
    inverse = tuple(np.argsort(axes))

    def forward(x):
        return np.transpose(x, axes), None

    def backward(g, ctx):
        return (np.transpose(g, inverse),)

    return apply_op("transpose", (a,), forward, backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        target = np.empty(a.size, dtype=np.int8).reshape(shape).shape
    except ValueError:
        raise ShapeError("reshape", [(a.name or "input", a.shape), ("target", shape)]) from None
    original = a.shape

    def forward(x):
        return x.reshape(target), None

    def backward(g, ctx):
        return (g.reshape(original),)

    return apply_op("reshape", (a,), forward, backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise GraphError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError("concat", [(x.name or f"input{i}", x.shape) for i, x in enumerate(tensors)])
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def forward(*values):
        return np.concatenate(values, axis=ax), None

    def backward(g, ctx):
        return tuple(np.split(g, bounds, axis=ax))

    return apply_op("concat", tensors, forward, backward)


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in items)


def slice_(a: Tensor, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(key)

    def forward(x):
        try:
            return np.array(x[key], dtype=DTYPE), None
        except IndexError:
            raise ShapeError("slice", [(a.name or "input", shape), ("index", np.shape(key))]) from None

    def backward(g, ctx):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return apply_op("slice", (a,), forward, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    def forward(x):
        s = special.softmax(x, axis=axis)
        return s, s

    def backward(g, s):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", (as_tensor(a),), forward, backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (no affine part)."""

    def forward(x):
        mu = x.mean(axis=-1, keepdims=True)
        centred = x - mu
        var = (centred * centred).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centred * inv
        return xhat, (xhat, inv)

    def backward(g, ctx):
        xhat, inv = ctx
        n = xhat.shape[-1]
        gx = (inv / n) * (
            n * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True)
        )
        return (gx,)

    return apply_op("layer_norm", (as_tensor(a),), forward, backward)


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""

    def forward(x):
        cdf = 0.5 * (1.0 + special.erf(x * _SQRT_HALF))
        return x * cdf, (x, cdf)

    def backward(g, ctx):
        x, cdf = ctx
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return apply_op("gelu", (as_tensor(a),), forward, backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexRangeError(f"embedding_lookup: id out of range [0, {rows}) in {table.name or 'table'}")
    table_shape = table.shape

    def forward(t):
        return t[ids], None

    def backward(g, ctx):
        gt = np.zeros(table_shape, dtype=DTYPE)
        np.add.at(gt, ids, g)
        return (gt,)

    return apply_op("embedding_lookup", (table,), forward, backward)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy over rows whose target is not ``ignore_index``.

    ``logits`` is [N, C]; rows with ignored targets contribute nothing. With no
    scored row the result is the constant 0.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError("cross_entropy", [(logits.name or "logits", logits.shape), ("targets", targets.shape)])
    valid = targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        return Tensor(0.0)
    classes = logits.shape[1]
    picked = targets[valid]
    if picked.min() < 0 or picked.max() >= classes:
        raise IndexRangeError(f"cross_entropy: target out of range [0, {classes})")
    rows = np.nonzero(valid)[0]

    def forward(x):
        logp = special.log_softmax(x[rows], axis=-1)
        loss = -logp[np.arange(count), picked].sum() / count
        return np.array(loss, dtype=DTYPE), logp

    def backward(g, logp):
        grad_rows = np.exp(logp)
        grad_rows[np.arange(count), picked] -= 1.0
        full = np.zeros(logits.shape, dtype=DTYPE)
        full[rows] = grad_rows * (g / count)
        return (full,)

    return apply_op("cross_entropy", (logits,), forward, backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def forward(x):
        return np.array(x.sum(axis=axis, keepdims=keepdims), dtype=DTYPE), None

    def backward(g, ctx):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum", (a,), forward, backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))

    def forward(x):
        return np.array(x.mean(axis=axis, keepdims=keepdims), dtype=DTYPE), None

    def backward(g, ctx):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return apply_op("mean", (a,), forward, backward)


def mask_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value``; no gradient flows there."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, a.shape)
    except ValueError:
        raise ShapeError("mask_fill", [(a.name or "input", a.shape), ("mask", mask.shape)]) from None
    shape = a.shape

    def forward(x):
        return np.where(mask, value, x), None

    def backward(g, ctx):
        return (_unbroadcast(np.where(mask, 0.0, g), shape),)

    return apply_op("mask_fill", (a,), forward, backward)


# --- Backward ---

def _graph_of(loss: Tensor) -> nx.DiGraph:
    graph = nx.DiGraph()
    graph.add_node(loss)
    stack = [loss]
    seen = {id(loss)}
    while stack:
        t = stack.pop()
        if t.node is None:
            continue
        for parent in t.node.parents:
            if not parent.requires_grad:
                continue
            graph.add_edge(parent, t)
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append(parent)
    return graph


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable requires_grad leaf."""
    if loss.data is None:
        evaluate(loss)
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    graph = _graph_of(loss)
    try:
        order = list(nx.topological_sort(graph))
    except nx.NetworkXUnfeasible:
        raise GraphError("computation graph contains a cycle") from None
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t.node.backward(g, t.node.ctx)
        for parent, pg in zip(t.node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# --- Gradient checking ---

@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    checks: list
    tol: float

    @property
    def passed(self) -> bool:
        return all(c.max_rel_error <= self.tol for c in self.checks)

    @property
    def failures(self) -> list:
        return [c.name for c in self.checks if c.max_rel_error > self.tol]

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)


def check_gradients(f, params, eps: float = 1e-5, tol: float = 1e-4, floor: float = 1e-3,
                    max_entries: int = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``f`` is a closure returning a scalar Tensor built from ``params``. The relative
    error of one entry is |a - n| / max(|a|, |n|, floor). ``max_entries`` caps the
    number of entries checked per parameter (a seeded sample, visited in index order).
    """
    params = list(params)
    zero_grad(params)
    loss = f()
    repeat = f()
    if loss.data.tobytes() != repeat.data.tobytes():
        raise GradCheckError("closure is not deterministic: two forward evaluations differ")
    backward(loss)
    rng = np.random.default_rng(seed)
    checks = []
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat_indices = np.arange(p.data.size)
        if max_entries is not None and p.data.size > max_entries:
            flat_indices = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
        worst = ParamCheck(name, 0.0, (), 0.0, 0.0)
        for flat in flat_indices:
            idx = np.unravel_index(flat, p.data.shape)
            original = p.data[idx]
            with no_grad():
                p.data[idx] = original + eps
                plus = f().item()
                p.data[idx] = original - eps
                minus = f().item()
            p.data[idx] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst.max_rel_error or not worst.worst_index:
                worst = ParamCheck(name, err, tuple(int(j) for j in idx), a, numeric)
        checks.append(worst)
    report = GradCheckReport(checks=checks, tol=tol)
    if report.passed:
        logger.debug(f"Gradient check passed for {len(checks)} parameters (max rel err {report.max_rel_error:.2e})")
    else:
        logger.warning(f"Gradient check failed for: {', '.join(report.failures)}")
    return report


# --- Parameters and modules ---

class Parameter(Tensor):
    """A trainable leaf tensor with a dot-path name and a learning-rate group."""

    def __init__(self, data, name: str, group: str):
        super().__init__(data, requires_grad=True, name=name)
        self.group = group


class Module:
    """Container registering parameters and child modules under a dot-path prefix."""

    def __init__(self, prefix: str, group: str):
        self.prefix = prefix
        self.group = group
        self._params = {}
        self._children = []

    def _full(self, local: str) -> str:
        return f"{self.prefix}.{local}" if self.prefix else local

    def param(self, local: str, data, group: str = None) -> Parameter:
        p = Parameter(data, self._full(local), group or self.group)
        self._params[local] = p
        return p

    def child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def named_parameters(self):
        for p in self._params.values():
            yield p.name, p
        for c in self._children:
            yield from c.named_parameters()

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        zero_grad(self.parameters())


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, prefix, group, d_in, d_out, rng, std=0.02, bias=True, zero=False):
        super().__init__(prefix, group)
        w = np.zeros((d_in, d_out)) if zero else _normal(rng, (d_in, d_out), std)
        self.weight = self.param("weight", w)
        self.bias = self.param("bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, prefix, group, dim, eps=1e-5):
        super().__init__(prefix, group)
        self.eps = eps
        self.gain = self.param("gain", np.ones(dim))
        self.bias = self.param("bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return add(mul(layer_norm(x, self.eps), self.gain), self.bias)


class Embedding(Module):
    def __init__(self, prefix, group, rows, dim, rng, std=0.02):
        super().__init__(prefix, group)
        self.table = self.param("table", _normal(rng, (rows, dim), std))

    def __call__(self, ids) -> Tensor:
        return embedding_lookup(self.table, ids)


def check_groups(named_params) -> None:
    seen = set()
    for name, p in named_params:
        if name in seen:
            raise ParameterGroupError(name, "duplicate name")
        seen.add(name)
        if getattr(p, "group", None) not in GROUPS:
            raise ParameterGroupError(name, getattr(p, "group", None))


# --- Optimizer and schedule ---

def _no_decay(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("bias", "gain")


@dataclass
class AdamWHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    hyper: AdamWHyper
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    decay: dict = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def for_params(cls, params, hyper: AdamWHyper = None) -> "AdamWState":
        state = cls(hyper=hyper or AdamWHyper())
        for p in params:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
            state.decay[p.name] = not _no_decay(p.name)
        return state


def adamw_step(params, state: AdamWState, lr: float, grads: dict = None) -> AdamWState:
    """One decoupled-weight-decay AdamW update with bias correction, in place.

    Gradients come from ``grads`` (name -> array) when given, else from ``p.grad``.
    Biases and layer-norm gains are not decayed.
    """
    if lr < 0:
        raise ScheduleError(f"learning rate must be non-negative, got {lr}")
    params = list(params)
    names = [p.name for p in params]
    if set(names) != set(state.m):
        raise MissingGradError(next(iter(set(state.m) ^ set(names))))
    resolved = []
    for p in params:
        g = grads.get(p.name) if grads is not None else p.grad
        if g is None:
            raise MissingGradError(p.name)
        resolved.append(g)
    h = state.hyper
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - h.beta1 ** t
    c2 = 1.0 - h.beta2 ** t
    for p, g in zip(params, resolved):
        m = state.m[p.name]
        v = state.v[p.name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + h.eps)
        if state.decay[p.name] and h.weight_decay:
            update = update + h.weight_decay * p.data
        p.data -= lr * update
    return state


def schedule_lr(step: int, total_steps: int, peak_lr: float, warmup_ratio: float) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0 at ``total_steps``."""
    if not 0.0 < warmup_ratio < 1.0:
        raise ScheduleError(f"warmup_ratio must lie in (0, 1), got {warmup_ratio}")
    if step < 0 or step > total_steps:
        raise ScheduleError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return 0.0
    warmup = warmup_ratio * total_steps
    if step <= warmup:
        return peak_lr * (step / warmup)
    return peak_lr * ((total_steps - step) / (total_steps - warmup))
