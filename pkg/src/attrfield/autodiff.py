"""Small numpy-backed reverse-mode automatic differentiation.

A :class:`Tensor` wraps a float64 ndarray and records vector-Jacobian
closures as operations build up a graph; ``backward()`` walks the graph in
reverse topological order. The module-level functions (``exp``, ``summe`` ...)
dispatch on input type, so pipeline code written against them runs both on
plain ndarrays (fast forward-only path) and on Tensors (training path).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "parameter",
    "constant",
    "value",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "absolute",
    "sqrt",
    "summe",
    "mean",
    "cumsum",
    "where",
    "concatenate",
    "stack",
    "take",
    "clip",
    "reshape",
    "transpose",
    "matmul",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Graph node: float64 data plus recorded vector-Jacobian products."""

    # Force numpy to defer to our operators instead of building object arrays.
    __array_ufunc__ = None
    __slots__ = ("data", "grad", "requires_grad", "_vjps")

    def __init__(self, data, requires_grad: bool = False, vjps=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._vjps = tuple(vjps)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _make(data, vjps) -> "Tensor":
        vjps = tuple((p, f) for p, f in vjps if p.requires_grad)
        return Tensor(data, requires_grad=bool(vjps), vjps=vjps)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        a, b = self, Tensor._lift(other)
        out = a.data + b.data
        return Tensor._make(out, [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ])

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, Tensor._lift(other)
        return Tensor._make(a.data - b.data, [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ])

    def __rsub__(self, other):
        return Tensor._lift(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, Tensor._lift(other)
        return Tensor._make(a.data * b.data, [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ])

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, Tensor._lift(other)
        return Tensor._make(a.data / b.data, [
            (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        ])

    def __rtruediv__(self, other):
        return Tensor._lift(other).__truediv__(self)

    def __neg__(self):
        return Tensor._make(-self.data, [(self, lambda g: -g)])

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("Tensor ** only supports scalar exponents")
        d = self.data
        return Tensor._make(d ** p, [(self, lambda g: g * p * d ** (p - 1))])

    def __matmul__(self, other):
        a, b = self, Tensor._lift(other)
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        return Tensor._make(a.data @ b.data, [
            (a, lambda g: g @ b.data.T),
            (b, lambda g: a.data.T @ g),
        ])

    def __rmatmul__(self, other):
        return Tensor._lift(other).__matmul__(self)

    def __getitem__(self, key):
        src_shape = self.data.shape

        def vjp(g):
            out = np.zeros(src_shape)
            np.add.at(out, key, g)
            return out

        return Tensor._make(np.asarray(self.data[key]), [(self, vjp)])

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        return Tensor._make(self.data.reshape(shape), [(self, lambda g: g.reshape(src))])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), [(self, lambda g: g.transpose(inv))])

    @property
    def T(self):
        return self.transpose()

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        src = self.data.shape

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, src).copy()
            ax = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, ax)
            return np.broadcast_to(g, src).copy()

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), [(self, vjp)])

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- autodiff ------------------------------------------------------------

    def detach(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None):
        """Accumulate gradients of this node into every reachable leaf."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._vjps:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._vjps:
                contrib = vjp(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def value(x) -> np.ndarray:
    """Raw ndarray behind either a Tensor or an array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# -- dispatching elementwise / structural functions ---------------------------


def _unary(x, fn, dfn):
    if isinstance(x, Tensor):
        out = fn(x.data)
        return Tensor._make(out, [(x, lambda g: g * dfn(x.data, out))])
    return fn(x)


def exp(x):
    return _unary(x, np.exp, lambda d, o: o)


def log(x):
    return _unary(x, np.log, lambda d, o: 1.0 / d)


def tanh(x):
    return _unary(x, np.tanh, lambda d, o: 1.0 - o * o)


def _sigmoid_raw(d):
    # Stable in both tails.
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    return _unary(x, _sigmoid_raw, lambda d, o: o * (1.0 - o))


def absolute(x):
    return _unary(x, np.abs, lambda d, o: np.sign(d))


def sqrt(x):
    return _unary(x, np.sqrt, lambda d, o: 0.5 / o)


def summe(x, axis=None, keepdims=False):
    """Sum that dispatches on Tensor vs ndarray ("sum" shadows builtins)."""
    if isinstance(x, Tensor):
        return x.sum(axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    if isinstance(x, Tensor):
        return x.mean(axis=axis, keepdims=keepdims)
    return np.mean(x, axis=axis, keepdims=keepdims)


def cumsum(x, axis=-1):
    if isinstance(x, Tensor):
        def vjp(g):
            return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

        return Tensor._make(np.cumsum(x.data, axis=axis), [(x, vjp)])
    return np.cumsum(x, axis=axis)


def where(cond, a, b):
    cond = np.asarray(cond)
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    if not (ta or tb):
        return np.where(cond, a, b)
    a_t, b_t = Tensor._lift(a), Tensor._lift(b)
    out = np.where(cond, a_t.data, b_t.data)
    return Tensor._make(out, [
        (a_t, lambda g: _unbroadcast(np.where(cond, g, 0.0), a_t.data.shape)),
        (b_t, lambda g: _unbroadcast(np.where(cond, 0.0, g), b_t.data.shape)),
    ])


def concatenate(parts, axis=0):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    parts = [Tensor._lift(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=axis)

    def make_vjp(lo, hi):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return Tensor._make(out, [
        (p, make_vjp(offsets[i], offsets[i + 1])) for i, p in enumerate(parts)
    ])


def stack(parts, axis=0):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.stack(parts, axis=axis)
    parts = [Tensor._lift(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return Tensor._make(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def take(x, idx):
    """Row gather along axis 0; backward is a scatter-add."""
    idx = np.asarray(idx)
    if isinstance(x, Tensor):
        src_shape = x.data.shape

        def vjp(g):
            out = np.zeros(src_shape)
            np.add.at(out, idx, g)
            return out

        return Tensor._make(x.data[idx], [(x, vjp)])
    return x[idx]


def scatter_rows(values, idx, n_rows: int):
    """Place rows at idx into a zeros array of n_rows; inverse of take.

    idx must not repeat. Backward is the row gather.
    """
    idx = np.asarray(idx)
    if isinstance(values, Tensor):
        out = np.zeros((n_rows,) + values.data.shape[1:], dtype=values.data.dtype)
        out[idx] = values.data
        return Tensor._make(out, [(values, lambda g: g[idx])])
    out = np.zeros((n_rows,) + values.shape[1:], dtype=values.dtype)
    out[idx] = values
    return out


def clip(x, lo, hi):
    if isinstance(x, Tensor):
        inside = (x.data >= lo) & (x.data <= hi)
        return Tensor._make(np.clip(x.data, lo, hi), [
            (x, lambda g: np.where(inside, g, 0.0)),
        ])
    return np.clip(x, lo, hi)


def reshape(x, shape):
    if isinstance(x, Tensor):
        return x.reshape(shape)
    return np.reshape(x, shape)


def transpose(x, axes):
    if isinstance(x, Tensor):
        return x.transpose(axes)
    return np.transpose(x, axes)


def matmul(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return Tensor._lift(a) @ Tensor._lift(b)
    return a @ b
