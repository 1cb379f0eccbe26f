"""Dynamic-graph reverse-mode differentiation over numpy arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the graph in reverse topological order and frees it afterwards.
"""
from __future__ import annotations

import contextlib

import numpy as np

from ..errors import ShapeError, StateError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._freed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self._freed:
            raise StateError("backward called on a graph that was already released; run forward again")
        if not self.requires_grad:
            raise StateError("backward called on a tensor with no recorded graph (forward not run with grad)")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward without explicit grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._freed = True


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if g.ndim > len(shape):
        g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise

def _pair(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _make(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)))


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a):
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)

    def back(g):
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * s,)

    return _make(out, (a,), back)


def softmax(a):
    """Row softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), back)


def l2_normalize(a, eps=1e-12):
    """Row-wise ``v / max(||v||, eps)``; the zero row maps to the zero row."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x / denom
    clipped = norm < eps

    def back(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        gx = (g - out * proj) / denom
        # below the floor the map is linear: x / eps
        return (np.where(clipped, g / denom, gx),)

    return _make(out, (a,), back)


# reductions and shape ops

def sum_all(a):
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a):
    shape, n = a.shape, a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def row_sum(a):
    """Sum over the last axis of a 2-D tensor -> (N, 1)."""
    return _make(a.data.sum(axis=-1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a):
    return reshape(a, (a.shape[0], -1))


def take_rows(a, idx):
    """Gather rows ``a[idx]`` (used to assemble triplets from a batch)."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def concat(tensors, axis=-1):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def stack_last(tensors):
    """Stack ``k`` tensors of shape (N, 1) or (N,) into (N, k)."""
    cols = [t if t.data.ndim == 2 else reshape(t, (t.shape[0], 1)) for t in tensors]
    return concat(cols, axis=1)


# linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


def _conv_out(h, w, kh, kw, sh, sw):
    return (h - kh) // sh + 1, (w - kw) // sw + 1


def _im2col(x, kh, kw, sh=1, sw=1):
    n, h, w, c = x.shape
    ho, wo = _conv_out(h, w, kh, kw, sh, sw)
    if kh == 1 and kw == 1 and sh == 1 and sw == 1:
        return x
    return np.concatenate(
        [x[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] for i in range(kh) for j in range(kw)],
        axis=-1,
    )


def conv2d(x, w, stride=(1, 1), bias=None):
    """Valid 2-D cross-correlation, with an optional fused per-filter bias.

    x: (N, H, W, C) channels-last; w: (kh, kw, C, F). Output
    (N, (H-kh)//sh+1, (W-kw)//sw+1, F).
    """
    n, h, wd, c = x.shape
    kh, kw, cin, f = w.shape
    sh, sw = stride
    if cin != c:
        raise ShapeError(f"conv2d expects {cin} input channels, got {c}")
    if h < kh or wd < kw:
        raise ShapeError(f"conv2d kernel {(kh, kw)} larger than input {(h, wd)}")
    ho, wo = _conv_out(h, wd, kh, kw, sh, sw)
    cols = _im2col(x.data, kh, kw, sh, sw).reshape(-1, kh * kw * c)
    wmat = w.data.reshape(kh * kw * c, f)
    out2 = cols @ wmat
    if bias is not None:
        out2 += bias.data
    out = out2.reshape(n, ho, wo, f)

    def back(g):
        g2 = g.reshape(-1, f)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=g.dtype)
            wd4 = w.data
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += (
                        (g2 @ wd4[i, j].T).reshape(n, ho, wo, c)
                    )
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, back)


def max_pool2d(x, ph=2, pw=2):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    n, h, w, c = x.shape
    ho, wo = h // ph, w // pw
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d window {(ph, pw)} larger than input {(h, w)}")
    xd = x.data
    views = [xd[:, i:ho * ph:ph, j:wo * pw:pw, :] for i in range(ph) for j in range(pw)]
    out = views[0]
    for v in views[1:]:
        out = np.maximum(out, v)

    def back(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        k = 0
        for i in range(ph):
            for j in range(pw):
                # first maximum in scan order gets the gradient
                hit = (views[k] == out) & ~taken
                taken |= hit
                gx[:, i:ho * ph:ph, j:wo * pw:pw, :] = g * hit
                k += 1
        return (gx,)

    return _make(out, (x,), back)
