"""Minimal dense reverse-mode automatic differentiation on numpy arrays.

Every op returns a new :class:`Tensor` holding float64 data.  When any input
requires a gradient, the output remembers its parents and a closure that maps
the output gradient to one gradient per parent.  :func:`backward` walks the
graph in reverse topological order, sums contributions per node, and adds the
result into ``.grad`` of every leaf that requires a gradient.

Forward values are checked for NaN/Inf after every op; a non-finite value
raises :class:`~fseb.errors.NumericError` immediately instead of poisoning
the rest of the graph.
"""

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DimensionError, NumericError, UsageError

_ids = itertools.count()

DROPOUT_MODES = ("train", "eval_mc", "off")


class Tensor:
    """Float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "id")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)


def _not_scalar(t):
    raise UsageError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def tsum(a):
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def reshape(a, shape):
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def flatten(a):
    return reshape(a, (a.shape[0], -1))


def concat(tensors):
    """Concatenate along the leading (batch) axis."""
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=0)
    except ValueError as exc:
        raise DimensionError("cannot concatenate tensors with different trailing shapes") from exc
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward, "concat")


def rows(a, start, stop):
    """Slice ``a[start:stop]`` along the leading axis."""
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop].copy(), (a,), backward, "rows")


# ---------------------------------------------------------------------------
# network primitives


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def transpose(a, axes):
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _check_conv(x_shape, k_shape):
    if len(x_shape) != 4 or len(k_shape) != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x_shape}, {k_shape}")
    if k_shape[2:] != (3, 3):
        raise DimensionError(f"conv2d supports 3x3 kernels only, got {k_shape[2]}x{k_shape[3]}")


def conv2d_nhwc(x, kernel, bias=None):
    """Channels-last core of :func:`conv2d`: B x H x W x C in, B x H x W x F out.

    The kernel keeps the F x C x 3 x 3 layout.  An optional bias of F values
    (any shape) is added in place, which saves a full pass over the output.
    """
    _check_conv(x.shape, kernel.shape)
    B, H, W, C = x.shape
    F, Ck = kernel.shape[:2]
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input has {C}, kernel expects {Ck}")
    if bias is not None and bias.size != F:
        raise DimensionError(f"conv2d bias has {bias.size} values for {F} filters")
    xp = np.zeros((B, H + 2, W + 2, C))
    xp[:, 1:-1, 1:-1, :] = x.data
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # B,H,W,C,3,3
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, 9 * C)  # patch order (i, j, c)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(F, 9 * C)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data.reshape(F)
    out = out.reshape(B, H, W, F)

    def backward(g):
        gmat = g.reshape(B * H * W, F)
        dk = (gmat.T @ cols).reshape(F, 3, 3, C).transpose(0, 3, 1, 2)
        db = () if bias is None else (gmat.sum(axis=0).reshape(bias.shape),)
        if not x.requires_grad:
            return (None, dk) + db
        # one small product per kernel offset beats a full 9C-wide column buffer
        dxp = np.zeros((B, H + 2, W + 2, C))
        for i in range(3):
            for j in range(3):
                k = 3 * i + j
                dxp[:, i:i + H, j:j + W, :] += (gmat @ wmat[:, k * C:(k + 1) * C]).reshape(B, H, W, C)
        return (dxp[:, 1:-1, 1:-1, :], dk) + db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward, "conv2d")


def conv2d(x, kernel):
    """3x3 cross-correlation (no kernel flip), stride 1, zero "same" padding.

    ``x`` is B x C x H x W and ``kernel`` is F x C x 3 x 3; the output is
    B x F x H x W.
    """
    _check_conv(x.shape, kernel.shape)
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}")
    return transpose(conv2d_nhwc(transpose(x, (0, 2, 3, 1)), kernel), (0, 3, 1, 2))


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))  # row-major order within a window


def maxpool2_nhwc(x):
    """Channels-last core of :func:`maxpool2`."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2 expects a 4-d input, got {x.shape}")
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    x6 = x.data.reshape(B, H // 2, 2, W // 2, 2, C)
    q = [x6[:, :, i, :, j, :] for i, j in _POOL_OFFSETS]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))

    def backward(g):
        # winner = first quarter equal to the max, found only when needed
        dx = np.zeros((B, H // 2, 2, W // 2, 2, C))
        free = np.ones(out.shape, dtype=bool)
        for k, (i, j) in enumerate(_POOL_OFFSETS):
            hit = (q[k] == out) & free
            np.multiply(hit, g, out=dx[:, :, i, :, j, :])
            free &= ~hit
        return (dx.reshape(B, H, W, C),)

    return _make(out, (x,), backward, "maxpool2")


def maxpool2(x):
    """Non-overlapping 2x2 max pooling on B x C x H x W.

    Ties send the whole gradient to the first maximal element in row-major
    order within the window.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2 expects B x C x H x W, got {x.shape}")
    return transpose(maxpool2_nhwc(transpose(x, (0, 2, 3, 1))), (0, 3, 1, 2))


def relu(x):
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), lambda g: (g * (out > 0),), "relu")


def dropout(x, rate, rng=None, mode="train"):
    """Inverted dropout.

    ``train`` and ``eval_mc`` both draw a fresh mask from ``rng`` (MC dropout
    keeps dropout active at prediction time); ``off`` is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in DROPOUT_MODES:
        raise ConfigError(f"unknown dropout mode {mode!r}")
    if mode == "off" or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in train/eval_mc mode needs an rng stream")
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.shape) >= rate) * scale
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


def softmax_np(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be B x K, got {logits.shape}")
    B, K = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise DimensionError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"labels must lie in [0, {K})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logz - z[np.arange(B), labels])

    def backward(g):
        p = np.exp(z - logz[:, None])
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return _make(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


def custom(inputs, value, vjp, op="custom"):
    """Wrap an externally computed value as a graph node.

    ``vjp(g)`` must return one gradient array per input.
    """
    return _make(np.asarray(value, dtype=np.float64), tuple(inputs), vjp, op)


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root):
    """Nodes reachable from ``root`` that carry gradients, parents first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Calling it again without resetting gradients accumulates.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss.id: np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
