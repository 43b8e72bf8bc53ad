"""Dense tensors with a reverse-mode tape.

Every differentiable operation is a :class:`Primitive` registered by name in
``REGISTRY``. ``apply`` runs the forward rule and, when any input requires a
gradient, records a node that ``backward`` later walks in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

REGISTRY: dict[str, type["Primitive"]] = {}

_grad_enabled = True
_force_eval = False


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or inf; carries the op name."""

    def __init__(self, op: str, shapes: Sequence[tuple]):
        self.op = op
        self.shapes = tuple(shapes)
        super().__init__(f"non-finite output from op '{op}' (input shapes {list(self.shapes)})")


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def force_eval():
    """Make every dropout call act as the identity, whatever mode it was given."""
    global _force_eval
    prev, _force_eval = _force_eval, True
    try:
        yield
    finally:
        _force_eval = prev


def eval_forced() -> bool:
    return _force_eval


class Context:
    """Scratch space a primitive's forward rule leaves for its backward rule."""

    def save(self, **kw):
        self.__dict__.update(kw)


class Primitive:
    name: str = ""

    @staticmethod
    def forward(ctx: Context, *args, **attrs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple:
        raise NotImplementedError


def register(cls: type[Primitive]) -> type[Primitive]:
    if not cls.name:
        raise ValueError(f"primitive {cls.__name__} has no name")
    REGISTRY[cls.name] = cls
    return cls


class _Node:
    __slots__ = ("prim", "inputs", "ctx")

    def __init__(self, prim, inputs, ctx):
        self.prim = prim
        self.inputs = inputs
        self.ctx = ctx


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; everything funnels through ``apply``
    def __add__(self, other):
        return apply("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return apply("mul", self, -1.0)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __rmatmul__(self, other):
        return apply("matmul", other, self)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)

    def max(self, axis=-1):
        return apply("max", self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("transpose", self, axes=axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def apply(name: str, *inputs, **attrs) -> Tensor:
    prim = REGISTRY[name]
    dtype = next((t.dtype for t in inputs if isinstance(t, Tensor)), None)
    tensors = [as_tensor(t, dtype) for t in inputs]
    ctx = Context()
    ctx.needs = tuple(t.requires_grad for t in tensors)
    out = prim.forward(ctx, *[t.data for t in tensors], **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(name, [t.shape for t in tensors])
    result = Tensor(out)
    if _grad_enabled and any(t.requires_grad for t in tensors):
        result.requires_grad = True
        result._node = _Node(prim, tensors, ctx)
    return result


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves passed explicitly but not reachable from ``loss`` get a zero
    gradient buffer if they had none.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = node.prim.backward(node.ctx, g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi, dtype=inp.dtype), inp.shape)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def parameter(data, dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def op_set() -> list[str]:
    """Names of every registered differentiable primitive."""
    return sorted(REGISTRY)

