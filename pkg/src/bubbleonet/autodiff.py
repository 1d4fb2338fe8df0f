"""Minimal reverse-mode engine on float64 numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar loss walks the recorded graph once in reverse
topological order.  Only the operations the operator networks need are
implemented (affine maps, elementwise algebra, sin/cos, relu, softplus,
sigmoid, reductions, slicing) plus :func:`custom_op` for compiled kernels.

Everything is deterministic: no in-graph randomness, fixed reduction orders,
float64 throughout.  Subgraphs that cannot influence any parameter are pruned
at construction time.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphError, ShapeError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None  # callable(grad_out) -> tuple of parent grads

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- elementwise algebra --------------------------------------------

    def __add__(self, other):
        a, b = self, Tensor._lift(other)
        return _node(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, Tensor._lift(other)
        return _node(
            a.data - b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        a, b = self, Tensor._lift(other)
        return _node(
            a.data * b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, Tensor._lift(other)
        return _node(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ShapeError("only constant exponents are supported")
        e = float(exponent)
        a = self
        return _node(a.data**e, (a,), lambda g: (g * e * a.data ** (e - 1.0),))

    # -- linear algebra ---------------------------------------------------

    def __matmul__(self, other):
        a, b = self, Tensor._lift(other)
        return _node(
            a.data @ b.data,
            (a, b),
            lambda g: (g @ b.data.T, a.data.T @ g),
        )

    @property
    def T(self):
        a = self
        return _node(a.data.T, (a,), lambda g: (np.ascontiguousarray(g.T),))

    def reshape(self, *shape):
        a = self
        old = a.data.shape
        return _node(a.data.reshape(*shape), (a,), lambda g: (g.reshape(old),))

    def __getitem__(self, key):
        a = self

        def vjp(g):
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            return (full,)

        return _node(a.data[key], (a,), vjp)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None):
        a = self

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

        return _node(a.data.sum(axis=axis), (a,), vjp)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    # -- reverse pass ---------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from this scalar; accumulates into ``.grad`` of
        every reachable tensor that requires gradients."""
        if self.data.size != 1:
            raise GraphError("backward() requires a scalar loss")
        if not self._parents:
            raise GraphError("value is not part of a recorded computation")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p._parents:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                if parent.requires_grad or parent._parents:
                    parent._accumulate(g)


def _node(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents
        out._vjp = vjp
    return out


def custom_op(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    """Graph node for an externally computed forward value.

    ``vjp(grad_out)`` must return one gradient array (or None) per parent.
    """
    return _node(data, tuple(Tensor._lift(p) for p in parents), vjp)


# -- nonlinearities -----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def heaviside(x: Tensor) -> Tensor:
    """0/1 step of ``x`` as a constant (zero-gradient a.e.); detached."""
    return Tensor((x.data > 0).astype(np.float64))


def sin(x: Tensor) -> Tensor:
    return _node(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x: Tensor) -> Tensor:
    return _node(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), overflow-safe; derivative is the logistic function."""
    d = x.data
    val = np.where(d > 0, d + np.log1p(np.exp(-np.abs(d))), np.log1p(np.exp(np.minimum(d, 0.0))))
    return _node(val, (x,), lambda g: (g * _sigmoid(d),))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map x @ W.T (+ b) with W stored (out, in)."""
    if x.data.shape[-1] != W.data.shape[1]:
        raise ShapeError(
            f"linear: input width {x.data.shape[-1]} != layer fan-in {W.data.shape[1]}"
        )
    y = x.data @ W.data.T
    if b is not None:
        y = y + b.data
        return _node(
            y,
            (x, W, b),
            lambda g: (g @ W.data, g.T @ x.data, g.sum(axis=0)),
        )
    return _node(y, (x, W), lambda g: (g @ W.data, g.T @ x.data))
