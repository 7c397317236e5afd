"""Dense-tensor reverse-mode autodiff core.

Tensors wrap row-major numpy arrays (float64 by default, float32 allowed for
training throughput) and carry an optional gradient slot. Operations record a
backward closure; calling ``backward()`` on a scalar result walks the graph in
reverse topological order and accumulates gradients into every tensor that
requires them.

All operations are pure functions of their inputs; graphs are built only while
gradient recording is enabled (see ``no_grad``).
"""

from __future__ import annotations

import contextlib

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional real array with an optional same-shape gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._grad_owned = False

    # -- array metadata ----------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autograd ----------------------------------------------------------

    def backward(self, seed=None):
        """Backpropagate from this tensor.

        ``seed`` defaults to ones and must match this tensor's shape; without a
        seed the tensor must be a scalar (size 1).
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ValueError("seed shape does not match tensor shape")

        topo = _topological_order(self)
        _accumulate(self, seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # interior node: gradient no longer needed once distributed
                node.grad = None
                node._grad_owned = False

    # -- operator sugar (implementations live in this module) ---------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable tensor with a unique hierarchical name.

    ``spectral_state`` holds the power-iteration vector pair (u, v) for
    spectrally normalized weights; both are kept at unit Euclidean norm.
    """

    __slots__ = ("name", "spectral_state")

    def __init__(self, data, name: str, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name
        self.spectral_state = None

    def init_spectral_state(self, rng: np.random.Generator):
        """Attach unit-norm power-iteration vectors for the (out x rest) matrix view."""
        out_dim = self.data.shape[-1]
        rest = self.data.size // out_dim
        u = rng.standard_normal(out_dim)
        v = rng.standard_normal(rest)
        self.spectral_state = (u / np.linalg.norm(u), v / np.linalg.norm(v))

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


# -- internal helpers --------------------------------------------------------


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _topological_order(root: Tensor):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data, parents, bwd) -> Tensor:
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = bwd
    return out


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), bwd)


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(data, (a, b), bwd)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), bwd)


def div(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, (a, b), bwd)


def neg(a):
    def bwd(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), bwd)


def power(a, p: float):
    data = a.data**p

    def bwd(g):
        _accumulate(a, g * p * a.data ** (p - 1))

    return _result(data, (a,), bwd)


def exp(a):
    data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * data)

    return _result(data, (a,), bwd)


def log(a):
    def bwd(g):
        _accumulate(a, g / a.data)

    return _result(np.log(a.data), (a,), bwd)


def sqrt(a):
    data = np.sqrt(a.data)

    def bwd(g):
        _accumulate(a, g / (2.0 * data))

    return _result(data, (a,), bwd)


def absolute(a):
    def bwd(g):
        _accumulate(a, g * np.sign(a.data))

    return _result(np.abs(a.data), (a,), bwd)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects tensors with at least 2 dimensions")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(data, (a, b), bwd)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accumulate(a, np.ascontiguousarray(g.transpose(inv)))

    return _result(data, (a,), bwd)


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _result(np.ascontiguousarray(data), (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + s)
            _accumulate(t, np.ascontiguousarray(g[tuple(sl)]))
            offset += s

    return _result(data, tuple(tensors), bwd)


def roll(a: Tensor, shifts, axes) -> Tensor:
    data = np.roll(a.data, shifts, axis=axes)
    inv = tuple(-s for s in shifts) if isinstance(shifts, tuple) else -shifts

    def bwd(g):
        _accumulate(a, np.roll(g, inv, axis=axes))

    return _result(data, (a,), bwd)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]`` with scatter-add gradient into the table."""
    data = table.data[idx]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accumulate(table, full)

    return _result(data, (table,), bwd)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))
