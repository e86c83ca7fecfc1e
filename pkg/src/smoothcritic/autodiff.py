"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every op on a graph-tracked Tensor records a backward
closure; Tensor.backward() walks the tape in reverse topological order.

Gradient accumulation contract: grads ADD across backward calls. Calling
backward twice on the same graph doubles accumulators; call zero_grad()
on your parameters between steps.

Broadcasting is limited to what the networks here need: equal shapes,
scalars against anything, a (d,) row vector against (batch, d), and a
(batch, 1) column against (batch, d). Gradients of broadcast operands
are summed back to the operand's shape.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _broadcastable(sa: tuple, sb: tuple) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    if len(sa) == 2 and sb == (sa[1],):
        return True
    if len(sb) == 2 and sa == (sb[1],):
        return True
    if len(sa) == 2 and len(sb) == 2 and sa[0] == sb[0] and (sa[1] == 1 or sb[1] == 1):
        return True
    if len(sa) == 2 and len(sb) == 2 and (sa == (1, 1) or sb == (1, 1)):
        return True
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Dense value with optional recorded lineage for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn = None

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple, backward_fn) -> "Tensor":
        tracked = tuple(p for p in parents if p._tracked())
        out = Tensor(data)
        if tracked:
            out._parents = tracked
            out._backward_fn = backward_fn
        return out

    def _tracked(self) -> bool:
        return self.requires_grad or self._backward_fn is not None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- elementwise binary ops ------------------------------------------

    def _binary(self, other, fwd, bwd_a, bwd_b) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        if not _broadcastable(self.shape, other.shape):
            raise ShapeError(f"incompatible shapes {self.shape} and {other.shape}")
        a, b = self, other
        out_data = fwd(a.data, b.data)

        def backward(g):
            if a._tracked():
                a._accumulate(_unbroadcast(bwd_a(g, a.data, b.data, out_data), a.shape))
            if b._tracked():
                b._accumulate(_unbroadcast(bwd_b(g, a.data, b.data, out_data), b.shape))

        return Tensor._from_op(out_data, (a, b), backward)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)

    def __rsub__(self, other):
        return Tensor(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(other, np.multiply,
                            lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, np.divide,
                            lambda g, a, b, o: g / b, lambda g, a, b, o: -g * a / (b * b))

    def __rtruediv__(self, other):
        return Tensor(other).__truediv__(self)

    def __neg__(self):
        return self * -1.0

    def minimum(self, other) -> "Tensor":
        """Elementwise min; ties route the gradient to the left operand."""
        return self._binary(
            other, np.minimum,
            lambda g, a, b, o: g * (a <= b),
            lambda g, a, b, o: g * (a > b))

    # -- elementwise unary ops -------------------------------------------

    def _unary(self, fwd, bwd) -> "Tensor":
        a = self
        out_data = fwd(a.data)

        def backward(g):
            a._accumulate(bwd(g, a.data, out_data))

        return Tensor._from_op(out_data, (a,), backward)

    def relu(self) -> "Tensor":
        # subgradient at 0 is 0
        return self._unary(lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0))

    def tanh(self) -> "Tensor":
        return self._unary(np.tanh, lambda g, x, o: g * (1.0 - o * o))

    def square(self) -> "Tensor":
        return self._unary(np.square, lambda g, x, o: g * 2.0 * x)

    def exp(self) -> "Tensor":
        return self._unary(np.exp, lambda g, x, o: g * o)

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise DomainError("log of non-positive value")
        return self._unary(np.log, lambda g, x, o: g / x)

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0.0):
            raise DomainError("sqrt of negative value")
        return self._unary(np.sqrt, lambda g, x, o: g * 0.5 / o)

    def clip(self, lo: float, hi: float) -> "Tensor":
        """Hard clamp; gradient is zero outside [lo, hi]."""
        return self._unary(
            lambda x: np.clip(x, lo, hi),
            lambda g, x, o: g * ((x >= lo) & (x <= hi)))

    # -- linear algebra ----------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")
        out_data = a.data @ b.data

        def backward(g):
            if a._tracked():
                a._accumulate(g @ b.data.T)
            if b._tracked():
                b._accumulate(a.data.T @ g)

        return Tensor._from_op(out_data, (a, b), backward)

    __matmul__ = matmul

    def transpose(self) -> "Tensor":
        a = self
        if a.data.ndim != 2:
            raise ShapeError("transpose expects a matrix")
        return Tensor._from_op(a.data.T.copy(), (a,), lambda g: a._accumulate(g.T))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # -- reductions --------------------------------------------------------

    def _reduce(self, op: str, axis, keepdims: bool) -> "Tensor":
        a = self
        if axis is not None and not (-a.data.ndim <= axis < a.data.ndim):
            raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
        fn = np.sum if op == "sum" else np.mean
        out_data = fn(a.data, axis=axis, keepdims=keepdims)
        count = a.data.size if axis is None else a.shape[axis]

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            full = np.broadcast_to(g, a.shape).copy()
            if op == "mean":
                full /= count
            a._accumulate(full)

        return Tensor._from_op(np.asarray(out_data), (a,), backward)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return self._reduce("sum", axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return self._reduce("mean", axis, keepdims)

    # -- shape ops ----------------------------------------------------------

    def cols(self, start: int, stop: int) -> "Tensor":
        """Column slice [:, start:stop] of a matrix."""
        a = self
        if a.data.ndim != 2:
            raise ShapeError("cols expects a matrix")
        out_data = a.data[:, start:stop].copy()

        def backward(g):
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a._accumulate(full)

        return Tensor._from_op(out_data, (a,), backward)

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar; accumulates into .grad of tracked tensors."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Join two tensors along `axis`; backward splits by original extents."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat ranks differ: {a.shape} vs {b.shape}")
    nd = a.data.ndim
    ax = axis % nd if nd else 0
    for d in range(nd):
        if d != ax and a.shape[d] != b.shape[d]:
            raise ShapeError(f"concat non-axis dims differ: {a.shape} vs {b.shape}")
    out_data = np.concatenate([a.data, b.data], axis=ax)
    split = a.shape[ax]

    def backward(g):
        ga, gb = np.split(g, [split], axis=ax)
        if a._tracked():
            a._accumulate(ga)
        if b._tracked():
            b._accumulate(gb)

    return Tensor._from_op(out_data, (a, b), backward)


def parameter(data) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()
