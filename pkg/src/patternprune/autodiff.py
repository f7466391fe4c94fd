"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Values are 2-D matrices, with a leading batch/head axis allowed for
sequence handling.  Every op records its inputs and a closure that maps
the output gradient to input gradients; ``Tensor.backward`` walks the
graph in reverse topological order.
"""

import math

import numpy as np

from .errors import DimensionError, NumericError, StateError

DTYPE = np.float64
LN_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A node in the compute graph.

    Leaves are created directly (parameters, inputs); interior nodes come
    out of the op functions below.  ``grad`` has the same shape as
    ``data`` once a backward pass has run through the node.
    """

    __slots__ = ("data", "grad", "op", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, name=None, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.op = op
        self.name = name
        self._parents = parents
        self._backward = backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor({self.op}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def _topo(self):
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
        return order

    def backward(self):
        """Populate ``grad`` on every node reachable from this scalar root.

        Returns a dict mapping leaf names to their gradients.  A root may be
        differentiated once; build a fresh graph to differentiate again.
        """
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise StateError("backward already ran on this graph; re-run the forward pass")
        order = self._topo()
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
        self._consumed = True
        return {n.name: n.grad for n in order if n.is_leaf and n.name is not None}


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = Tensor(a.data + b.data, op="add", parents=(a, b))

    def backward(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad += _unbroadcast(g, b.shape)

    out._backward = backward
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    out = Tensor(a.data - b.data, op="sub", parents=(a, b))

    def backward(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad -= _unbroadcast(g, b.shape)

    out._backward = backward
    return out


def hadamard(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "hadamard")
    out = Tensor(a.data * b.data, op="hadamard", parents=(a, b))

    def backward(g):
        a.grad += _unbroadcast(g * b.data, a.shape)
        b.grad += _unbroadcast(g * a.data, b.shape)

    out._backward = backward
    return out


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * c, op="scale", parents=(a,))

    def backward(g):
        a.grad += g * c

    out._backward = backward
    return out


def matmul(a, b):
    """Matrix product; leading axes broadcast as in ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        value = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None
    out = Tensor(value, op="matmul", parents=(a, b))

    def backward(g):
        a.grad += _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        b.grad += _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    out._backward = backward
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), op="reshape", parents=(a,))

    def backward(g):
        a.grad += g.reshape(a.shape)

    out._backward = backward
    return out


def permute(a, axes):
    inverse = np.argsort(axes)
    out = Tensor(np.transpose(a.data, axes), op="permute", parents=(a,))

    def backward(g):
        a.grad += np.transpose(g, inverse)

    out._backward = backward
    return out


def transpose(a):
    """Swap the last two axes."""
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def total(a):
    """Sum of all entries as a scalar node."""
    out = Tensor(a.data.sum(), op="sum", parents=(a,))

    def backward(g):
        a.grad += g

    out._backward = backward
    return out


def gelu(x):
    """Tanh-approximated GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * v * (1.0 + t), op="gelu", parents=(x,))

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        x.grad += g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)

    out._backward = backward
    return out


def softmax_rows(x):
    """Softmax along the last axis, with per-row max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, op="softmax", parents=(x,))

    def backward(g):
        x.grad += s * (g - (g * s).sum(axis=-1, keepdims=True))

    out._backward = backward
    return out


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize each row (last axis) to zero mean, unit variance, then affine."""
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match features {x.shape}"
        )
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, op="layer_norm", parents=(x, gain, bias))

    def backward(g):
        n = v.shape[-1]
        gain.grad += _unbroadcast(g * xhat, gain.shape)
        bias.grad += _unbroadcast(g, bias.shape)
        gx = g * gain.data
        x.grad += inv / n * (
            n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True)
        )

    out._backward = backward
    return out


def cross_entropy(logits, labels):
    """Mean cross-entropy of ``logits`` (batch x classes) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(logsum - z[rows, labels]))
    out = Tensor(loss, op="cross_entropy", parents=(logits,))

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        logits.grad += g * p / len(labels)

    out._backward = backward
    return out


def embed(table, ids):
    """Gather rows of ``table`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids], op="embed", parents=(table,))

    def backward(g):
        np.add.at(table.grad, ids, g)

    out._backward = backward
    return out


def masked_fill(x, keep, value):
    """Entries where ``keep`` is false become the constant ``value``."""
    keep = np.asarray(keep, dtype=bool)
    out = Tensor(np.where(keep, x.data, value), op="masked_fill", parents=(x,))

    def backward(g):
        x.grad += np.where(keep, g, 0.0)

    out._backward = backward
    return out


def straight_through_mask(w, mask):
    """Forward ``w * mask``; backward passes the gradient to ``w`` unchanged."""
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != w.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match weight {w.shape}")
    out = Tensor(w.data * mask, op="ste_mask", parents=(w,))

    def backward(g):
        w.grad += g

    out._backward = backward
    return out


def grad_check(f, at, step=1e-5, grad=None, entries=None):
    """Max relative error between an analytic gradient and central differences.

    ``f`` maps an ndarray to a float.  ``grad`` is the analytic gradient at
    ``at``; when omitted, ``f`` is evaluated on a leaf Tensor and
    differentiated with ``backward``.  ``entries`` restricts the check to a
    subset of flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    at = np.array(at, dtype=DTYPE)
    if grad is None:
        leaf = Tensor(at.copy())
        root = f(leaf)
        root.backward()
        grad = leaf.grad
        fn = lambda arr: float(f(Tensor(arr)).data)  # noqa: E731
    else:
        fn = lambda arr: float(f(arr))  # noqa: E731
    grad = np.asarray(grad, dtype=DTYPE).reshape(at.shape)
    flat = at.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(at)
        flat[i] = orig - step
        fm = fn(at)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value near flat index {i}")
        numeric = (fp - fm) / (2 * step)
        analytic = grad.reshape(-1)[i]
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, err)
    return worst
