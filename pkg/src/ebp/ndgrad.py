"""Small reverse-mode automatic differentiation over numpy arrays.

Every primitive records a node holding its parents and a vector-Jacobian
product written in terms of other primitives.  Running the backward pass
with ``create_graph=True`` therefore records the gradient computation
itself, so gradients can be differentiated again (Hessian-vector products,
backpropagation through unrolled gradient-based dynamics).

All arithmetic is float64.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "DisconnectedGraphError",
    "tensor", "zeros", "ones", "grad", "hvp", "no_grad", "enable_grad",
    "is_grad_enabled", "check_finite",
    "add", "sub", "neg", "mul", "div", "matmul", "sum", "mean", "max",
    "sorted_sum", "exp", "log", "tanh", "relu", "sigmoid", "softplus",
    "sqrt", "square", "norm2", "concat", "take", "scatter_add", "reshape",
    "transpose", "broadcast_to", "clip",
]


class ShapeError(ValueError):
    pass


class DisconnectedGraphError(ValueError):
    pass


_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(flag):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that disables recording of new nodes."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """Dense float64 array with an optional node in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    # -- metadata ---------------------------------------------------------
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
    def is_leaf(self):
        return self._vjp is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators --------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        if p == 0.5:
            return sqrt(self)
        raise NotImplementedError("only squares and square roots are supported")

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def square(self):
        return square(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op):
    """Wrap a forward result, recording a node when any parent needs grad."""
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, vjp, op)
    return Tensor(data)


# -- graph traversal --------------------------------------------------------
class Tape:
    """Topologically ordered record of the nodes that produced ``output``.

    Inputs always precede the nodes that consume them; walking ``nodes`` in
    reverse visits each node exactly once.
    """

    def __init__(self, output):
        self.output = output
        self.nodes = self._toposort(output)
        self._index = {id(n): i for i, n in enumerate(self.nodes)}

    @staticmethod
    def _toposort(root):
        order, seen = [], set()
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
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def __contains__(self, t):
        return id(t) in self._index

    def __len__(self):
        return len(self.nodes)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    return g


def grad(output, inputs, create_graph=False, allow_unused=False, grad_output=None):
    """Gradient of a scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph=True`` the returned tensors are recorded, so a second
    call differentiates the gradient.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = _as_tensor(grad_output)
    if not output.requires_grad:
        if allow_unused:
            out = [Tensor(np.zeros_like(x.data)) for x in inputs]
            return out[0] if single else out
        raise DisconnectedGraphError("output is not connected to any differentiable input")

    tape = Tape(output)
    target_ids = {id(x) for x in inputs}
    # Nodes whose gradient matters: the inputs and anything downstream of one.
    needed = set()
    for node in tape.nodes:
        if id(node) in target_ids or any(id(p) in needed for p in node._parents):
            needed.add(id(node))
    for x in inputs:
        if x not in tape and not allow_unused:
            raise DisconnectedGraphError(
                f"input of shape {x.shape} is not on the tape of this output")

    grads = {id(output): seed}
    results = {}
    with _grad_mode(create_graph):
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in target_ids:
                results[id(node)] = g
            if node._vjp is None:
                continue
            wanted = [p.requires_grad and id(p) in needed for p in node._parents]
            if not any(wanted):
                continue
            pgrads = node._vjp(g, wanted)
            for p, pg, w in zip(node._parents, pgrads, wanted):
                if not w or pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    out = []
    for x in inputs:
        g = results.get(id(x))
        if g is None:
            if not allow_unused:
                raise DisconnectedGraphError(
                    f"input of shape {x.shape} received no gradient")
            g = Tensor(np.zeros_like(x.data))
        out.append(g)
    return out[0] if single else out


def hvp(f, x, v):
    """Hessian-vector product of scalar function ``f`` at ``x`` along ``v``."""
    x = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    with enable_grad():
        y = f(x)
        g = grad(y, [x], create_graph=True)[0]
        gv = sum(mul(g, _as_tensor(v)))
    return grad(gv, [x])[0]


def check_finite(t, what="tensor"):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values in {what}")
    return t


# -- primitives -------------------------------------------------------------
def _operands(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def add(a, b):
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, w):
        return (_unbroadcast(g, sa) if w[0] else None,
                _unbroadcast(g, sb) if w[1] else None)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, w):
        return (_unbroadcast(g, sa) if w[0] else None,
                _unbroadcast(neg(g), sb) if w[1] else None)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g, w: (neg(g),), "neg")


def mul(a, b):
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, w):
        return (_unbroadcast(mul(g, b), sa) if w[0] else None,
                _unbroadcast(mul(g, a), sb) if w[1] else None)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    out = None

    def vjp(g, w):
        ga = _unbroadcast(div(g, b), sa) if w[0] else None
        gb = _unbroadcast(neg(div(mul(g, out), b)), sb) if w[1] else None
        return ga, gb

    out = _make(a.data / b.data, (a, b), vjp, "div")
    return out


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def vjp(g, w):
        return (matmul(g, transpose(b)) if w[0] else None,
                matmul(transpose(a), g) if w[1] else None)

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_back(g, shape, axes, keepdims):
    if not keepdims:
        kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
        g = reshape(g, kshape)
    return broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,),
                 lambda g, w: (_expand_back(g, shape, axes, keepdims),), "sum")


def sorted_sum(a, axis=0, keepdims=False):
    """Sum along ``axis`` after sorting the values along it.

    The result does not depend on the order of elements along ``axis``,
    bit for bit, which makes set pooling exactly permutation invariant.
    """
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    if len(axes) != 1:
        raise ShapeError("sorted_sum reduces a single axis")
    shape = a.shape
    data = np.sort(a.data, axis=axes[0]).sum(axis=axes[0], keepdims=keepdims)
    return _make(data, (a,), lambda g, w: (_expand_back(g, shape, axes, keepdims),),
                 "sorted_sum")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis, keepdims), 1.0 / count)


def max(a, axis=None, keepdims=False):
    """Max reduction; the subgradient goes to the first maximal entry."""
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    # Move reduced axes to the end and flatten them so argmax picks the
    # lowest flat index among ties.
    keep = [i for i in range(a.ndim) if i not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
    idx = np.argmax(flat, axis=-1)
    mask_flat = np.zeros_like(flat)
    np.put_along_axis(mask_flat, idx[..., None], 1.0, axis=-1)
    inv = np.argsort(keep + list(axes))
    mask = np.transpose(mask_flat.reshape(moved.shape), inv)
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        data = data.reshape(tuple(1 if i in axes else s for i, s in enumerate(shape)))

    def vjp(g, w):
        return (mul(_expand_back(g, shape, axes, keepdims), Tensor(mask)),)

    return _make(data, (a,), vjp, "max")


def exp(a):
    a = _as_tensor(a)
    out = None

    def vjp(g, w):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), vjp, "exp")
    return out


def log(a):
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g, w: (div(g, a),), "log")


def tanh(a):
    a = _as_tensor(a)
    out = None

    def vjp(g, w):
        return (mul(g, sub(1.0, square(out))),)

    out = _make(np.tanh(a.data), (a,), vjp, "tanh")
    return out


def relu(a):
    a = _as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g, w: (mul(g, Tensor(mask)),), "relu")


def sigmoid(a):
    a = _as_tensor(a)
    out = None

    def vjp(g, w):
        return (mul(g, mul(out, sub(1.0, out))),)

    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    data[~pos] = e / (1.0 + e)
    out = _make(data, (a,), vjp, "sigmoid")
    return out


def softplus(a):
    a = _as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    return _make(data, (a,), lambda g, w: (mul(g, sigmoid(a)),), "softplus")


def sqrt(a):
    a = _as_tensor(a)
    out = None

    def vjp(g, w):
        return (div(g, mul(out, 2.0)),)

    out = _make(np.sqrt(a.data), (a,), vjp, "sqrt")
    return out


def square(a):
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g, w: (mul(g, mul(a, 2.0)),), "square")


def norm2(a, axis=None, keepdims=False):
    """Euclidean norm over ``axis`` (all entries by default)."""
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = None

    def vjp(g, w):
        return (mul(_expand_back(div(g, out), shape, axes, keepdims), a),)

    data = np.sqrt((a.data * a.data).sum(axis=axes, keepdims=keepdims))
    out = _make(data, (a,), vjp, "norm2")
    return out


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i]
                                 for i in range(ndim) if i != ax):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g, w):
        out = []
        for i, wi in enumerate(w):
            if not wi:
                out.append(None)
                continue
            index = [slice(None)] * ndim
            index[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(take(g, tuple(index)))
        return out

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(data, tuple(tensors), vjp, "concat")


def take(a, index):
    """Basic or integer-array indexing; the reverse pass scatter-adds."""
    a = _as_tensor(a)
    shape = a.shape
    return _make(a.data[index], (a,), lambda g, w: (scatter_add(g, index, shape),), "take")


def scatter_add(g, index, shape):
    """Zeros of ``shape`` with ``g`` added at ``index`` (duplicates accumulate)."""
    g = _as_tensor(g)
    data = np.zeros(shape)
    np.add.at(data, index, g.data)
    return _make(data, (g,), lambda gg, w: (take(gg, index),), "scatter_add")


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g, w: (reshape(g, old),), "reshape")


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g, w: (transpose(g, inv),), "transpose")


def broadcast_to(a, shape):
    a = _as_tensor(a)
    old = a.shape
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(np.ascontiguousarray(data), (a,),
                 lambda g, w: (_unbroadcast(g, old),), "broadcast_to")


def clip(a, lo, hi):
    """Elementwise clamp; gradient passes only where the value was inside."""
    a = _as_tensor(a)
    mask = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g, w: (mul(g, Tensor(mask)),), "clip")
