"""Reverse-mode automatic differentiation over dense float64 arrays.

Tape-based: each operation returns a Tensor holding a backward closure that
scatters adjoints into its parents. Everything runs in double precision and
row-major layout; no other dtype is ever constructed.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "DimensionError",
    "NumericError",
    "no_grad",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "logistic",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "clip",
    "tsum",
    "tmean",
    "tmax",
    "softmax",
    "logsumexp",
    "concat",
    "reshape",
    "transpose",
    "take_rows",
    "slice_cols",
    "repeat_rows",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes do not chain."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends tape recording (evaluation paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense float64 array with an optional gradient of the same shape.

    ``values`` exposes the flat row-major view of the data. Tensors are
    created either as leaves (``requires_grad`` set by the caller) or as op
    outputs carrying a backward closure.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        return self.data.ravel()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate gradients of this (scalar) tensor into the tape leaves."""
        if seed is None:
            if self.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise DimensionError("seed shape does not match tensor shape")
        order = _toposort(self)
        _accumulate(self, seed)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor):
    """Iterative depth-first topological order, returned in reverse."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D operands, with 1-D vector promotion on either side."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError("matmul expects 1-D or 2-D operands")
    ak = a.data.shape[-1]
    bk = b.data.shape[0]
    if ak != bk:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        a2 = a.data if a.ndim == 2 else a.data[None, :]
        b2 = b.data if b.ndim == 2 else b.data[:, None]
        g2 = g
        if a.ndim == 1 and b.ndim == 1:
            g2 = np.asarray(g).reshape(1, 1)
        elif a.ndim == 1:
            g2 = np.asarray(g).reshape(1, -1)
        elif b.ndim == 1:
            g2 = np.asarray(g).reshape(-1, 1)
        ga = g2 @ b2.T
        gb = a2.T @ g2
        _accumulate(a, ga.reshape(a.data.shape))
        _accumulate(b, gb.reshape(b.data.shape))

    return _make(out_data, (a, b), backward)


# nonlinearities -----------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g):
        _accumulate(a, g * mask)

    return _make(out_data, (a,), backward)


def _stable_logistic(x: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments, so no overflow at any |x|
    s = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + s), s / (1.0 + s))


def logistic(a) -> Tensor:
    a = as_tensor(a)
    y = _stable_logistic(a.data)

    def backward(g):
        _accumulate(a, g * y * (1.0 - y))

    return _make(y, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * y)

    return _make(y, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / y)

    return _make(y, (a,), backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def backward(g):
        _accumulate(a, g * sign)

    return _make(np.abs(a.data), (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the band edges."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accumulate(a, g * mask)

    return _make(out_data, (a,), backward)


# reductions ---------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the adjoint routes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    idx_exp = np.expand_dims(idx, axis)
    out_keep = np.take_along_axis(a.data, idx_exp, axis=axis)
    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, idx_exp, gg, axis=axis)
        _accumulate(a, buf)

    return _make(out_data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Row-stable softmax (max subtracted before exponentiation)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _make(y, (a,), backward)


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    soft = e / s

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, soft * gg)

    return _make(out_data, (a,), backward)


# structure ----------------------------------------------------------------

def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")

    def backward(g):
        _accumulate(a, g.T)

    return _make(a.data.T, (a,), backward)


def take_rows(a, indices) -> Tensor:
    """Gather along axis 0; the adjoint scatter-adds into the source rows."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accumulate(a, buf)

    return _make(out_data, (a,), backward)


def slice_cols(a, lo: int, hi: int) -> Tensor:
    """Contiguous column slice of a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("slice_cols expects a 2-D tensor")
    out_data = a.data[:, lo:hi].copy()

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[:, lo:hi] = g
        _accumulate(a, buf)

    return _make(out_data, (a,), backward)


def repeat_rows(a, count: int) -> Tensor:
    """Tile a 1-D tensor into `count` identical rows."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise DimensionError("repeat_rows expects a 1-D tensor")
    out_data = np.broadcast_to(a.data, (count, a.data.shape[0])).copy()

    def backward(g):
        _accumulate(a, g.sum(axis=0))

    return _make(out_data, (a,), backward)


# parameters ---------------------------------------------------------------

class ParamStore:
    """Named trainable tensors plus their Adam moment state.

    Iteration order is insertion order everywhere, which keeps training and
    checkpoint layout deterministic.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def moments(self, name: str):
        return self._m[name], self._v[name]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def scale_grads(self, factor: float):
        for t in self._params.values():
            if t.grad is not None:
                t.grad *= factor

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())


# finite differences -------------------------------------------------------

def grad_check(fn, inputs, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor; ``inputs`` is a list of
    arrays. Returns the worst relative error
    |analytic - numeric| / max(1, |analytic|) over every coordinate.
    """
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in arrays]
    out = fn(leaves)
    if out.size != 1:
        raise DimensionError("grad_check target must be scalar")
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite value from closure")
    out.backward()
    analytic = []
    for leaf in leaves:
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if not np.isfinite(g).all():
            raise NumericError("non-finite analytic gradient")
        analytic.append(g.copy())

    def value_at(pert):
        with no_grad():
            res = fn([Tensor(p) for p in pert])
        if not np.isfinite(res.data).all():
            raise NumericError("non-finite value during finite differencing")
        return res.item()

    worst = 0.0
    for i, base in enumerate(arrays):
        flat_g = analytic[i].ravel()
        for j in range(base.size):
            bumped = [b.copy() for b in arrays]
            bumped[i].ravel()[j] += eps
            f_plus = value_at(bumped)
            bumped[i].ravel()[j] -= 2.0 * eps
            f_minus = value_at(bumped)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = flat_g[j]
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
