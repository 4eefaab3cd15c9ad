"""Tensor-level reverse-mode differentiation on top of numpy, plus parameter storage.

Every model parameter lives in one flat float64 vector (:class:`ParameterStore`).
An objective is a python function ``f(params, inputs)`` that builds a scalar
:class:`Tensor` from named parameter leaves; :func:`forward_eval` runs it and
:func:`backward_grad` returns the gradient as a flat vector aligned with the store.
"""
from __future__ import annotations

import json
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

PARAMS_VERSION = "dif-lab/params/v1"

_state = threading.local()


class UnregisteredParameterError(KeyError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an objective evaluates to nan/inf (the optimisation diverged)."""


class ContextConsumedError(RuntimeError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (sampling, grids, frozen models)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    # -- construction helpers -------------------------------------------
    @staticmethod
    def _result(data, parents: tuple, backward: Callable) -> "Tensor":
        if _grad_enabled() and any(p.requires_grad for p in parents):
            return Tensor(data, True, parents, backward)
        return Tensor(data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Detached copy: participates in the forward pass but never receives gradient."""
    return Tensor(x.data if isinstance(x, Tensor) else x)


stop_gradient = constant


# -- elementwise binary ops ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._result(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._result(out, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data @ b.data, (a, b), backward)


# -- elementwise unary ops ------------------------------------------------------
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return Tensor._result(out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# -- reductions -----------------------------------------------------------------
def _expand_like(g, axis, keepdims, shape):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (np.array(_expand_like(g, axis, keepdims, a.shape)),)

    return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def logsumexp(a, axis=-1, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp; rows that are entirely -inf give -inf with zero gradient."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True)) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            soft = np.exp(a.data - out_k)
        soft = np.where(np.isfinite(out_k), soft, 0.0)
        return (gk * soft,)

    return Tensor._result(out, (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    return a - logsumexp(a, axis=axis, keepdims=True)


# -- shape ops ------------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor._result(np.stack([t.data for t in ts], axis=axis), tuple(ts), backward)


def take_diagonal(a) -> Tensor:
    """(N, K, K) -> (N, K) picking a[:, k, k]."""
    a = as_tensor(a)
    k = a.shape[-1]
    idx = np.arange(k)

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, idx, idx] = g
        return (full,)

    return Tensor._result(a.data[:, idx, idx], (a,), backward)


# -- gradient context ---------------------------------------------------------
def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backprop(root: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse sweep from a scalar root; returns d root / d leaf for each leaf."""
    grads = {id(root): np.ones_like(root.data)}
    if root.requires_grad:
        for node in reversed(_toposort(root)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64)
    return [grads.get(id(leaf), np.zeros_like(leaf.data)).reshape(leaf.shape) for leaf in leaves]


@dataclass(frozen=True)
class Slot:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=int))


class ParamView(Mapping):
    """Name -> Tensor mapping handed to objectives; unknown names raise."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise UnregisteredParameterError(name) from None

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)


class ParameterStore:
    """Flat float64 parameter vector with named, shaped slices."""

    def __init__(self):
        self.values = np.zeros(0)
        self.registry: list[Slot] = []
        self._index: dict[str, Slot] = {}

    def __len__(self) -> int:
        return self.values.size

    def __contains__(self, name: str) -> bool:
        return name in self._index

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.registry]

    def add(self, name: str, init) -> None:
        if name in self._index:
            raise ValueError(f"parameter {name!r} already registered")
        init = np.asarray(init, dtype=np.float64)
        slot = Slot(name, self.values.size, tuple(init.shape))
        self.values = np.concatenate([self.values, init.ravel()])
        self.registry.append(slot)
        self._index[name] = slot

    def slot(self, name: str) -> Slot:
        try:
            return self._index[name]
        except KeyError:
            raise UnregisteredParameterError(name) from None

    def get(self, name: str) -> np.ndarray:
        s = self.slot(name)
        return self.values[s.offset : s.offset + s.size].reshape(s.shape)

    def set(self, name: str, value) -> None:
        s = self.slot(name)
        value = np.broadcast_to(np.asarray(value, dtype=np.float64), s.shape)
        self.values[s.offset : s.offset + s.size] = value.ravel()

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        other.values = self.values.copy()
        other.registry = list(self.registry)
        other._index = dict(self._index)
        return other

    def with_values(self, values: np.ndarray) -> "ParameterStore":
        other = self.copy()
        other.values = np.array(values, dtype=np.float64)
        return other

    def leaves(self) -> dict[str, Tensor]:
        return {s.name: Tensor(self.get(s.name).copy(), requires_grad=True) for s in self.registry}

    def constants(self) -> ParamView:
        return ParamView({s.name: Tensor(self.get(s.name)) for s in self.registry})

    def flatten(self, per_name: dict[str, np.ndarray]) -> np.ndarray:
        flat = np.zeros_like(self.values)
        for s in self.registry:
            flat[s.offset : s.offset + s.size] = np.ravel(per_name[s.name])
        return flat

    def to_dict(self) -> dict:
        return {
            "version": PARAMS_VERSION,
            "params": {
                s.name: {"shape": list(s.shape), "values": self.get(s.name).ravel().tolist()}
                for s in self.registry
            },
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "ParameterStore":
        if blob.get("version") != PARAMS_VERSION:
            raise ValueError(f"unsupported parameter blob version {blob.get('version')!r}")
        store = cls()
        for name, entry in blob["params"].items():
            shape = tuple(entry["shape"])
            store.add(name, np.asarray(entry["values"], dtype=np.float64).reshape(shape))
        return store

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ParameterStore":
        return cls.from_dict(json.loads(text))


class GradientContext:
    """Recorded graph of one scalar evaluation. Single use: backward consumes it."""

    def __init__(self, store: ParameterStore, leaves: dict[str, Tensor], output: Tensor):
        self.store = store
        self.leaves = leaves
        self.output = output
        self.consumed = False


def forward_eval(f: Callable, store: ParameterStore, inputs=None) -> tuple[float, GradientContext]:
    leaves = store.leaves()
    out = as_tensor(f(ParamView(leaves), inputs))
    if out.data.size != 1:
        raise ValueError(f"objective must be scalar, got shape {out.shape}")
    value = float(out.data)
    if not np.isfinite(value):
        raise NonFiniteError(f"objective evaluated to {value}")
    return value, GradientContext(store, leaves, out.reshape(()))


def backward_grad(ctx: GradientContext) -> np.ndarray:
    if ctx.consumed:
        raise ContextConsumedError("gradient context already consumed")
    ctx.consumed = True
    names = list(ctx.leaves)
    grads = backprop(ctx.output, [ctx.leaves[n] for n in names])
    flat = ctx.store.flatten(dict(zip(names, grads)))
    ctx.leaves = ctx.output = None
    return flat


def value_and_grad(f: Callable, store: ParameterStore, inputs=None) -> tuple[float, np.ndarray]:
    value, ctx = forward_eval(f, store, inputs)
    return value, backward_grad(ctx)


def evaluate(f: Callable, store: ParameterStore, inputs=None) -> float:
    with no_grad():
        return float(as_tensor(f(store.constants(), inputs)).data)


def finite_diff_check(f: Callable, store: ParameterStore, step: float = 1e-5, inputs=None) -> float:
    """Max over parameters of |analytic - central difference| / (|analytic| + step)."""
    if step <= 0:
        raise ValueError("step must be positive")
    _, grad = value_and_grad(f, store, inputs)
    probe = store.copy()
    worst = 0.0
    for i in range(len(store)):
        base = store.values[i]
        probe.values[i] = base + step
        up = evaluate(f, probe, inputs)
        probe.values[i] = base - step
        down = evaluate(f, probe, inputs)
        probe.values[i] = base
        fd = (up - down) / (2.0 * step)
        worst = max(worst, abs(grad[i] - fd) / (abs(grad[i]) + step))
    return worst
