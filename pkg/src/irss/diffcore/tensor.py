"""Dense float64 tensors with a reverse-mode gradient tape.

Every operation on a tracked :class:`Tensor` records a closure that pushes the
upstream gradient to its parents. ``Tensor.backward`` topologically sorts the
graph reachable from a scalar and runs the closures in reverse order. The tape
is rebuilt on every forward pass; nothing is retained between steps.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import ConfigError, ContractError, ShapeError

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad, shape):
    # sum out dimensions that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tensor:
    """n-dimensional float64 array that can take part in the gradient tape.

    Parameters
    ----------
    data : array_like
        Values; always copied to a C-contiguous float64 array.
    requires_grad : bool
        Mark the tensor as a leaf whose gradient should be accumulated.
    name : str, optional
        Label used in error messages.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=()):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = None

    # -- bookkeeping -----------------------------------------------------
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
        """Flat view of the values in row-major order."""
        return self.data.ravel()

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    @staticmethod
    def _make(data, parents, backward):
        parents = tuple(p for p in parents if p.requires_grad)
        out = Tensor(data)
        if parents and is_grad_enabled():
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def _accumulate(self, grad):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self):
        """Propagate d(self)/d(leaf) into ``.grad`` of every tracked leaf.

        Returns a dict mapping each reached leaf to its gradient array.
        """
        if self.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        order, seen = [], set()
        stack = [(self, False)]
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

        grads = {id(self): np.ones_like(self.data)}
        leaves = {}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                leaves[node] = node.grad
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return leaves

    # -- elementwise arithmetic -----------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return [_unbroadcast(g, p.shape) for p in (a, b) if p.requires_grad]

        return Tensor._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: [-g])

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            out = []
            if a.requires_grad:
                out.append(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                out.append(_unbroadcast(g * a.data, b.shape))
            return out

        return Tensor._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            out = []
            if a.requires_grad:
                out.append(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                out.append(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
            return out

        return Tensor._make(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ContractError("tensor exponents are not supported")
        p = float(exponent)
        a = self
        return Tensor._make(
            a.data ** p, (a,), lambda g: [g * p * a.data ** (p - 1.0)]
        )

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul of {a.shape} and {b.shape}")

        def backward(g):
            out = []
            if a.requires_grad:
                out.append(g @ b.data.T)
            if b.requires_grad:
                out.append(a.data.T @ g)
            return out

        return Tensor._make(a.data @ b.data, (a, b), backward)

    # -- reductions and reshaping ----------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return [np.broadcast_to(g, a.shape).copy()]

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: [g.reshape(a.shape)])

    @property
    def T(self):
        a = self
        return Tensor._make(a.data.T, (a,), lambda g: [g.T])

    def __getitem__(self, index):
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return [full]

        return Tensor._make(a.data[index], (a,), backward)

    # -- pointwise nonlinearities ----------------------------------------
    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: [g * out])

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: [g / a.data])

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, (a,), lambda g: [g * mask])

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return Tensor._make(out, (a,), lambda g: [g * (1.0 - out * out)])

    def clip_min(self, floor):
        """max(x, floor); the gradient is blocked where the floor is active."""
        a = self
        mask = a.data >= floor
        return Tensor._make(np.maximum(a.data, floor), (a,), lambda g: [g * mask])


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, cuts, axis=axis)
        return [p for p, t in zip(parts, tensors) if t.requires_grad]

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(data, tensors, backward)


def softmax(logits, axis=-1):
    """Row-wise softmax with the max-shift for stability."""
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return [p * (g - (g * p).sum(axis=axis, keepdims=True))]

    return Tensor._make(p, (logits,), backward)


def log_softmax(logits, axis=-1):
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return [g - p * g.sum(axis=axis, keepdims=True)]

    return Tensor._make(out, (logits,), backward)


def grad_reverse(x, lam=1.0):
    """Identity on the forward pass; multiplies the gradient by ``-lam`` on the way back."""
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0:
        raise ConfigError(f"gradient-reversal weight must be >= 0, got {lam}")
    x = as_tensor(x)
    return Tensor._make(x.data.copy(), (x,), lambda g: [-lam * g])


def _im2col(x, k):
    n, c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    s = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, shape=(n, c, k, k, oh, ow), strides=(s[0], s[1], s[2], s[3], s[2], s[3])
    )
    # (n, oh, ow, c*k*k)
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n, oh * ow, c * k * k)


def conv2d(x, weight, bias=None):
    """Valid (no padding), stride-1 cross-correlation.

    x: (n, c_in, h, w); weight: (c_out, c_in, k, k); bias: (c_out,).
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d input {x.shape} vs kernel {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, _, k, k2 = weight.shape
    if k != k2 or k > h or k > w:
        raise ShapeError(f"kernel {k}x{k2} does not fit input {h}x{w}")
    oh, ow = h - k + 1, w - k + 1
    xd = np.ascontiguousarray(x.data)
    cols = _im2col(xd, k)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    data = out.transpose(0, 2, 1).reshape(n, c_out, oh, ow)

    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        gm = g.reshape(n, c_out, oh * ow).transpose(0, 2, 1)  # (n, ohw, c_out)
        grads = []
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, oh, ow, c_in, k, k)
            gx = np.zeros_like(xd)
            for di in range(k):
                for dj in range(k):
                    gx[:, :, di:di + oh, dj:dj + ow] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            grads.append(gx)
        if weight.requires_grad:
            gw = np.einsum("npo,npk->ok", gm, cols)
            grads.append(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            grads.append(gm.sum(axis=(0, 1)))
        return grads

    return Tensor._make(data, parents, backward)


def mean_pool2d(x, size=2):
    """Non-overlapping mean pooling; trailing rows/cols that do not fill a window are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"mean_pool2d expects (n, c, h, w), got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh == 0 or ow == 0:
        raise ShapeError(f"pool size {size} larger than input {h}x{w}")
    crop = x.data[:, :, : oh * size, : ow * size]
    data = crop.reshape(n, c, oh, size, ow, size).mean(axis=(3, 5))

    def backward(g):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        full = np.zeros_like(x.data)
        full[:, :, : oh * size, : ow * size] = up
        return [full]

    return Tensor._make(data, (x,), backward)
