"""Small reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward() walks
the tape in reverse topological order and accumulates gradients into every
reachable leaf. Broadcasting is supported by summing gradients back to the
operand shape. The contract is agreement with central finite differences
(step 1e-4, relative error below 1e-4); tests hold it to that.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = ["Tensor", "tensor", "concat", "stack", "segment_sum", "rot_apply",
           "mid_matmul", "finite_difference"]


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo numpy broadcasting: reduce grad down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    # Make numpy defer mixed expressions like `ndarray - tensor` to the
    # reflected operators below instead of building object arrays.
    __array_ufunc__ = None

    def __init__(self, data, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.name = name

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name})"

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: np.ndarray | None = None):
        """Reverse sweep from this tensor; seeds with ones for scalars."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed needs a scalar output")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(seed, dtype=float))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = tensor(other)
        out = Tensor(self.data + other.data, (self, other))
        def back(g):
            self._accum(_sum_to_shape(g, self.data.shape))
            other._accum(_sum_to_shape(g, other.data.shape))
        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-tensor(other))

    def __rsub__(self, other):
        return tensor(other) + (-self)

    def __mul__(self, other):
        other = tensor(other)
        out = Tensor(self.data * other.data, (self, other))
        def back(g):
            self._accum(_sum_to_shape(g * other.data, self.data.shape))
            other._accum(_sum_to_shape(g * self.data, other.data.shape))
        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = tensor(other)
        out = Tensor(self.data / other.data, (self, other))
        def back(g):
            self._accum(_sum_to_shape(g / other.data, self.data.shape))
            other._accum(_sum_to_shape(-g * self.data / other.data ** 2, other.data.shape))
        out._backward = back
        return out

    def __rtruediv__(self, other):
        return tensor(other) / self

    def __pow__(self, exponent: float):
        out = Tensor(self.data ** exponent, (self,))
        out._backward = lambda g: self._accum(g * exponent * self.data ** (exponent - 1))
        return out

    def __matmul__(self, other):
        other = tensor(other)
        out = Tensor(self.data @ other.data, (self, other))
        def back(g):
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 1:
                self._accum(g * b)
                other._accum(g * a)
                return
            ga = g @ np.swapaxes(b, -1, -2) if b.ndim > 1 else np.outer(g, b) if a.ndim > 1 else g * b
            gb = np.swapaxes(a, -1, -2) @ g if a.ndim > 1 else np.outer(a, g)
            self._accum(_sum_to_shape(np.asarray(ga), a.shape))
            other._accum(_sum_to_shape(np.asarray(gb), b.shape))
        out._backward = back
        return out

    def __rmatmul__(self, other):
        return tensor(other) @ self

    # -- shaping ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), (self,))
        out._backward = lambda g: self._accum(g.reshape(self.data.shape))
        return out

    def transpose(self, *axes):
        axes = axes or None
        out = Tensor(self.data.transpose(axes) if axes else self.data.T, (self,))
        inv = np.argsort(axes) if axes else None
        out._backward = lambda g: self._accum(g.transpose(inv) if axes else g.T)
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], (self,))
        def back(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, key, g)
            self._accum(buf)
        out._backward = back
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        def back(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy())
        out._backward = back
        return out

    def mean(self, axis=None, keepdims=False):
        denom = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(denom))

    # -- elementwise ----------------------------------------------------------

    def exp(self):
        val = np.exp(self.data)
        out = Tensor(val, (self,))
        out._backward = lambda g: self._accum(g * val)
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))
        out._backward = lambda g: self._accum(g / self.data)
        return out

    def sqrt(self):
        val = np.sqrt(self.data)
        out = Tensor(val, (self,))
        out._backward = lambda g: self._accum(g * 0.5 / val)
        return out

    def abs(self):
        out = Tensor(np.abs(self.data), (self,))
        out._backward = lambda g: self._accum(g * np.sign(self.data))
        return out

    def sigmoid(self):
        val = expit(self.data)
        out = Tensor(val, (self,))
        out._backward = lambda g: self._accum(g * val * (1.0 - val))
        return out

    def silu(self):
        sig = expit(self.data)
        out = Tensor(self.data * sig, (self,))
        out._backward = lambda g: self._accum(g * sig * (1.0 + self.data * (1.0 - sig)))
        return out

    def tanh(self):
        val = np.tanh(self.data)
        out = Tensor(val, (self,))
        out._backward = lambda g: self._accum(g * (1.0 - val * val))
        return out


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---- multi-input ops ----------------------------------------------------------

def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    def back(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            p._accum(piece)
    out._backward = back
    return out


def stack(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    out = Tensor(np.stack([p.data for p in parts], axis=axis), tuple(parts))
    def back(g):
        for k, p in enumerate(parts):
            p._accum(np.take(g, k, axis=axis))
    out._backward = back
    return out


def segment_sum(t: Tensor, index: np.ndarray, n_segments: int) -> Tensor:
    """out[s] = sum of t rows whose index equals s; rows may be empty."""
    t = tensor(t)
    index = np.asarray(index, dtype=int)
    buf = np.zeros((n_segments,) + t.data.shape[1:])
    np.add.at(buf, index, t.data)
    out = Tensor(buf, (t,))
    out._backward = lambda g: t._accum(g[index])
    return out


def rot_apply(mats: np.ndarray, t: Tensor) -> Tensor:
    """Batched constant matrix application: out[e] = mats[e] @ t[e].

    mats is (E, a, b) constant, t is (E, b, C); gradients flow through t only.
    """
    t = tensor(t)
    out = Tensor(np.einsum("eab,ebc->eac", mats, t.data), (t,))
    out._backward = lambda g: t._accum(np.einsum("eab,eac->ebc", mats, g))
    return out


def mid_matmul(mat: np.ndarray, t: Tensor) -> Tensor:
    """Shared constant matrix along the middle axis: out[b] = mat @ t[b].

    mat is (a, m) constant, t is (B, m, C) -> (B, a, C).
    """
    t = tensor(t)
    out = Tensor(np.einsum("am,bmc->bac", mat, t.data), (t,))
    out._backward = lambda g: t._accum(np.einsum("am,bac->bmc", mat, g))
    return out


# ---- finite differences ---------------------------------------------------------

def finite_difference(fn, arrays: dict[str, np.ndarray], step: float = 1e-4) -> dict[str, np.ndarray]:
    """Central-difference gradient of scalar fn(arrays) w.r.t. every array entry."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr, dtype=float)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + step
            hi = fn(arrays)
            flat[k] = keep - step
            lo = fn(arrays)
            flat[k] = keep
            gflat[k] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads
