"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records a straight-line program of array primitives. Trainable
leaves are views into a flat :class:`ParamVector`; :func:`backward` returns the
gradient of a scalar root in the same flat layout.

    tape = Tape(params)
    W = tape.param("K")
    loss = tape.sqnorm(W @ tape.constant(x) - tape.constant(y))
    grad = backward(tape, loss)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, NonFiniteError


@dataclass
class ParamVector:
    """Flat parameter storage with a name -> (offset, shape) layout."""

    values: np.ndarray
    layout: dict = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, arrays):
        layout = {}
        offset = 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=float)
            layout[name] = (offset, arr.shape)
            offset += arr.size
        values = np.empty(offset)
        for name, arr in arrays.items():
            start, shape = layout[name]
            values[start:start + int(np.prod(shape, dtype=int))] = np.ravel(arr)
        return cls(values, layout)

    def view(self, name):
        start, shape = self.layout[name]
        size = int(np.prod(shape, dtype=int))
        return self.values[start:start + size].reshape(shape)

    def arrays(self):
        return {name: self.view(name).copy() for name in self.layout}

    def copy(self):
        return ParamVector(self.values.copy(), dict(self.layout))

    def zeros_like(self):
        return ParamVector(np.zeros_like(self.values), dict(self.layout))

    def __len__(self):
        return self.values.size


class Node:
    """A value on the tape; supports ``+ - @`` and scalar ``*``."""

    __slots__ = ("tape", "id", "value", "parents", "vjp", "param")

    def __init__(self, tape, value, parents=(), vjp=None, param=None):
        self.tape = tape
        self.id = len(tape.nodes)
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.param = param
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __rmatmul__(self, other):
        return self.tape.matmul(other, self)

    def __mul__(self, c):
        return self.tape.scale(self, c)

    __rmul__ = __mul__

    def __getitem__(self, idx):
        return self.tape.index(self, idx)

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.shape})"


def _unbroadcast(g, shape):
    # reduce a broadcast adjoint back to the operand's shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Records primitives in topological (creation) order."""

    def __init__(self, params: ParamVector | None = None):
        self.params = params
        self.nodes: list[Node] = []
        self._leaf_cache = {}

    def param(self, name):
        if name not in self._leaf_cache:
            self._leaf_cache[name] = Node(self, self.params.view(name), param=name)
        return self._leaf_cache[name]

    def constant(self, value):
        return Node(self, np.asarray(value, dtype=float))

    def _lift(self, x):
        return x if isinstance(x, Node) else self.constant(x)

    # primitives -----------------------------------------------------------

    def add(self, a, b):
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.shape, b.shape
        return Node(self, a.value + b.value, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b):
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.shape, b.shape
        return Node(self, a.value - b.value, (a, b),
                    lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def scale(self, a, c):
        a = self._lift(a)
        c = float(c)
        return Node(self, c * a.value, (a,), lambda g: (c * g,))

    def matmul(self, a, b):
        """Matrix product; 1-D operands follow numpy's vector conventions."""
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        if av.shape[-1] != bv.shape[0]:
            raise DimensionError(f"matmul shapes {av.shape} and {bv.shape}")

        def vjp(g):
            if av.ndim == 1 and bv.ndim == 1:
                return g * bv, g * av
            if av.ndim == 1:
                return bv @ g, np.outer(av, g)
            if bv.ndim == 1:
                return np.outer(g, bv), av.T @ g
            return g @ bv.T, av.T @ g

        return Node(self, av @ bv, (a, b), vjp)

    def transpose(self, a):
        a = self._lift(a)
        return Node(self, a.value.T, (a,), lambda g: (g.T,))

    def tanh(self, a):
        a = self._lift(a)
        y = np.tanh(a.value)
        return Node(self, y, (a,), lambda g: (g * (1.0 - y * y),))

    def sum(self, a):
        a = self._lift(a)
        shape = a.shape
        return Node(self, np.asarray(a.value.sum()), (a,),
                    lambda g: (np.broadcast_to(g, shape).copy(),))

    def sqnorm(self, a, weights=None):
        """Sum of squares, optionally weighted per leading-axis row."""
        a = self._lift(a)
        v = a.value
        if weights is None:
            return Node(self, np.asarray(np.sum(v * v)), (a,), lambda g: (2.0 * g * v,))
        w = np.asarray(weights, dtype=float)
        wb = w.reshape(w.shape + (1,) * (v.ndim - w.ndim))
        return Node(self, np.asarray(np.sum(wb * v * v)), (a,),
                    lambda g: (2.0 * g * wb * v,))

    def index(self, a, idx):
        a = self._lift(a)
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Node(self, a.value[idx], (a,), vjp)

    def concat(self, parts, axis=-1):
        parts = [self._lift(p) for p in parts]
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=axis))

        return Node(self, np.concatenate([p.value for p in parts], axis=axis), tuple(parts), vjp)


def backward(tape: Tape, root: Node) -> ParamVector:
    """Gradient of scalar ``root`` with respect to every parameter of the tape."""
    if np.size(root.value) != 1:
        raise DimensionError(f"root must be scalar, got shape {root.shape}")
    adj = {root.id: np.ones_like(root.value, dtype=float)}
    grad = tape.params.zeros_like() if tape.params is not None else None
    for node in reversed(tape.nodes[:root.id + 1]):
        g = adj.pop(node.id, None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite adjoint at node {node.id}", node_id=node.id)
        if node.param is not None:
            grad.view(node.param)[...] += g
            continue
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent.id in adj:
                adj[parent.id] = adj[parent.id] + pg
            else:
                adj[parent.id] = pg
    return grad


def grad_check(loss: Callable[[Tape], Node], p: ParamVector, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``loss`` builds the scalar on a tape bound to whatever ParamVector it is given.
    """
    if not h > 0:
        raise ValueError("step must be positive")

    def value(params):
        v = float(loss(Tape(params)).value)
        if not np.isfinite(v):
            raise NonFiniteError("loss is not finite")
        return v

    tape = Tape(p)
    root = loss(tape)
    if not np.isfinite(float(root.value)):
        raise NonFiniteError("loss is not finite")
    analytic = backward(tape, root).values
    probe = p.copy()
    worst = 0.0
    for i in range(len(p)):
        orig = probe.values[i]
        probe.values[i] = orig + h
        up = value(probe)
        probe.values[i] = orig - h
        down = value(probe)
        probe.values[i] = orig
        fd = (up - down) / (2.0 * h)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return worst
