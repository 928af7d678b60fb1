"""Recording tape, variables and the reverse sweep.

A ``Var`` wraps a numpy array that was produced on a ``Tape``.  Every op in
``ops`` accepts plain arrays as well; when none of its inputs is a ``Var`` it
just returns the numpy result, so the same model code runs with or without
gradient recording.

Complex values carry adjoints in the (re, im) convention:
``grad = dL/d(re z) + 1j * dL/d(im z)``.  A descent step on a complex leaf is
therefore ``z -= lr * grad``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from ..errors import NumericError, UsageError


@dataclass
class Node:
    op: str
    value: np.ndarray
    inputs: tuple
    needs: tuple
    vjp: Optional[Callable]
    name: Optional[str] = None


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var.__r<op>__

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self):
        return self.value.size

    @property
    def name(self):
        return self.tape.nodes[self.index].name

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        op = self.tape.nodes[self.index].op
        return f"Var(op={op!r}, shape={self.shape}, dtype={self.dtype})"

    # operator sugar; the ops module is imported lazily to avoid a cycle
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    def __getitem__(self, idx):
        return _ops().getitem(self, idx)

    def conj(self):
        return _ops().conj(self)

    @property
    def real(self):
        return _ops().real(self)

    @property
    def imag(self):
        return _ops().imag(self)

    @property
    def T(self):
        return _ops().transpose(self)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)


def _ops():
    from . import ops

    return ops


class Tape:
    """Ordered record of primitive ops.

    Nodes are appended as ops execute, so recording order is a valid
    topological order.  A tape has one writer; create a fresh tape per
    truncation window.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def __iter__(self) -> Iterator[Node]:
        return iter(self.nodes)

    def leaf(self, value, name: Optional[str] = None) -> Var:
        value = np.asarray(value)
        if not (np.issubdtype(value.dtype, np.floating) or np.issubdtype(value.dtype, np.complexfloating)):
            value = value.astype(np.float64)
        self.nodes.append(Node("leaf", value, (), (), None, name))
        return Var(value, self, len(self.nodes) - 1)

    def leaves(self, arrays: dict) -> dict:
        return {k: self.leaf(v, name=k) for k, v in arrays.items()}

    def record(self, op: str, value, inputs: tuple, vjp: Callable) -> Var:
        needs = tuple(isinstance(x, Var) for x in inputs)
        for x in inputs:
            if isinstance(x, Var) and x.tape is not self:
                raise UsageError(f"op {op!r} mixes variables from different tapes")
        self.nodes.append(Node(op, value, inputs, needs, vjp))
        return Var(value, self, len(self.nodes) - 1)


class Grad:
    """Adjoints of the leaves of one tape, keyed by leaf name or by ``Var``."""

    def __init__(self, by_index: dict, tape: Tape):
        self._by_index = by_index
        self._tape = tape

    def __getitem__(self, key):
        if isinstance(key, Var):
            return self._by_index[key.index]
        for i, g in self._by_index.items():
            if self._tape.nodes[i].name == key:
                return g
        raise KeyError(key)

    def __contains__(self, key):
        try:
            self[key]
        except KeyError:
            return False
        return True

    def named(self) -> dict:
        out = {}
        for i, g in self._by_index.items():
            name = self._tape.nodes[i].name
            if name is not None:
                out[name] = g
        return out


def backward(tape: Tape, loss: Var, check_finite: bool = True) -> Grad:
    """Reverse sweep from a real scalar ``loss`` to every leaf of ``tape``."""
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise UsageError("loss must be a Var recorded on the given tape")
    if loss.value.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
    if np.iscomplexobj(loss.value):
        raise UsageError("loss must be real-valued")

    nodes = tape.nodes
    last = loss.index
    if check_finite:
        for i in range(last + 1):
            v = nodes[i].value
            if not np.all(np.isfinite(v)):
                node = nodes[i]
                label = node.name or node.op
                raise NumericError(f"non-finite forward value at node {i} ({label})")

    grads: list = [None] * (last + 1)
    grads[last] = np.ones_like(loss.value)
    for i in range(last, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        in_grads = node.vjp(g, node.needs)
        for x, need, gx in zip(node.inputs, node.needs, in_grads):
            if not need or gx is None:
                continue
            j = x.index
            grads[j] = gx if grads[j] is None else grads[j] + gx

    by_index = {}
    for i in range(len(nodes)):
        if nodes[i].op != "leaf":
            continue
        g = grads[i] if i <= last else None
        if g is None:
            g = np.zeros_like(nodes[i].value)
        by_index[i] = g
    return Grad(by_index, tape)
