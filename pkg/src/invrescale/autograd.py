"""A minimal reverse-mode tape over numpy arrays.

Each ``Var`` keeps its value, the parents it was computed from and a closure
mapping the upstream gradient to one gradient per parent.  ``backward`` walks
the graph in reverse topological order.  Only the handful of operations the
rescaler needs are provided; dtype follows the inputs, so gradient checks can
run the same graph in float64.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Var:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.data.shape}, dtype={self.data.dtype})"

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

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return mul(self, 1.0 / other)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self, grad=None):
        backward(self, grad)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(data, parents, backward_fn) -> Var:
    out = Var(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def backward(root: Var, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if grad is None:
        if root.data.size != 1:
            raise ValueError("backward() without an explicit gradient needs a scalar root")
        grad = np.ones_like(root.data)

    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.asarray(grad)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


def add(a, b) -> Var:
    if _is_scalar(b):
        a, b = b, a
    if _is_scalar(a):
        b = as_var(b)
        return _node(b.data + float(a), (b,), lambda g: (g,))
    a, b = as_var(a), as_var(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    if _is_scalar(b):
        return add(a, -float(b))
    if _is_scalar(a):
        return add(mul(b, -1.0), float(a))
    a, b = as_var(a), as_var(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        a, c = as_var(a), float(b)
        return _node(a.data * c, (a,), lambda g: (g * c,))
    a, b = as_var(a), as_var(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def exp(x) -> Var:
    x = as_var(x)
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def tanh(x) -> Var:
    x = as_var(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x) -> Var:
    x = as_var(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def square(x) -> Var:
    x = as_var(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x) -> Var:
    """Square root whose gradient at exactly zero is taken as zero."""
    x = as_var(x)
    y = np.sqrt(x.data)

    def grad(g):
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g / (2.0 * safe), 0.0).astype(g.dtype),)

    return _node(y, (x,), grad)


def quantize_ste(x, levels: int = 255) -> Var:
    """Clamp to [0, 1] and round to ``levels`` steps, half away from zero.

    The backward pass is straight-through inside [0, 1] and zero outside.
    """
    x = as_var(x)
    clamped = np.clip(x.data, 0.0, 1.0)
    y = (np.floor(clamped * levels + 0.5) / levels).astype(x.data.dtype)
    inside = (x.data >= 0.0) & (x.data <= 1.0)
    return _node(y, (x,), lambda g: (g * inside,))


# reductions and shape ------------------------------------------------------

def sum_(x, axis=None, keepdims=False) -> Var:
    x = as_var(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True),)

    return _node(y, (x,), grad)


def mean(x, axis=None, keepdims=False) -> Var:
    x = as_var(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape) -> Var:
    x = as_var(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Var:
    x = as_var(x)
    inverse = np.argsort(axes)
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def getitem(x, index) -> Var:
    x = as_var(x)

    def grad(g):
        out = np.zeros_like(x.data, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _node(x.data[index], (x,), grad)


def concat(xs, axis=0) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


# linear maps ---------------------------------------------------------------

def linear(x, w, b=None) -> Var:
    """``x @ w.T + b`` for x of shape (N, in) and w of shape (out, in)."""
    x, w = as_var(x), as_var(w)
    y = x.data @ w.data.T
    out = _node(y, (x, w), lambda g: (g @ w.data, g.T @ x.data))
    return out if b is None else add(out, b)


def channel_mix(x, w) -> Var:
    """Apply the matrix ``w`` to the channel vector at every site of (N, C, H, W)."""
    x, w = as_var(x), as_var(w)
    y = np.einsum("ij,njhw->nihw", w.data, x.data, optimize=True)
    return _node(y, (x, w), lambda g: (
        np.einsum("ij,nihw->njhw", w.data, g, optimize=True),
        np.einsum("nihw,njhw->ij", g, x.data, optimize=True),
    ))


def channel_mix_t(x, w) -> Var:
    """Like ``channel_mix`` with the transpose of ``w``."""
    x, w = as_var(x), as_var(w)
    y = np.einsum("ji,njhw->nihw", w.data, x.data, optimize=True)
    return _node(y, (x, w), lambda g: (
        np.einsum("ji,nihw->njhw", w.data, g, optimize=True),
        np.einsum("njhw,nihw->ji", x.data, g, optimize=True),
    ))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Var:
    """2-D cross-correlation of (N, C, H, W) with weights (O, C, k, k)."""
    x, w = as_var(x), as_var(w)
    n, c, h, wd = x.shape
    o, c2, k, k2 = w.shape
    if c != c2 or k != k2:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, C, k, k) -> rows of C*k*k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    y = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def grad(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape, dtype=gcols.dtype)
            for dy in range(k):
                for dx in range(k):
                    gxp[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride] += \
                        gcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    out = _node(np.ascontiguousarray(y), (x, w), grad)
    if b is not None:
        out = add(out, reshape(b, (1, o, 1, 1)))
    return out


def tile_spatial(tile, h: int, w: int) -> Var:
    """Repeat a (C, P, Q) tile over an (h, w) grid, truncating the last tiles."""
    tile = as_var(tile)
    c, p, q = tile.shape
    ry, rx = -(-h // p), -(-w // q)
    y = np.tile(tile.data, (1, ry, rx))[:, :h, :w]

    def grad(g):
        full = np.zeros((c, ry * p, rx * q), dtype=g.dtype)
        full[:, :h, :w] = g
        return (full.reshape(c, ry, p, rx, q).sum(axis=(1, 3)),)

    return _node(y, (tile,), grad)


def as_batch(x):
    """Return (x as a batched Var, whether the caller passed a Var, whether a batch dim was added)."""
    is_var = isinstance(x, Var)
    v = x if is_var else Var(np.asarray(x))
    squeeze = v.ndim == 3
    if squeeze:
        v = reshape(v, (1,) + v.shape)
    elif v.ndim != 4:
        raise ValueError(f"expected a (C, H, W) or (N, C, H, W) tensor, got shape {v.shape}")
    return v, is_var, squeeze


def unbatch(y: Var, is_var: bool, squeeze: bool):
    """Undo ``as_batch``: drop the added batch dim and unwrap if the caller passed an array."""
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y if is_var else y.data


def probe_gradients(loss_fn, params: dict, probes: int = 5, rng=None, h: float = 1e-6):
    """Compare tape gradients with central differences at random coordinates.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar ``Var``.  Returns ``{name: (analytic, numeric)}`` arrays
    of length ``probes`` per parameter.  Run it in float64.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for n, p in params.items()}
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        a, num = [], []
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            a.append(analytic[name].reshape(-1)[i])
            num.append((fp - fm) / (2 * h))
        out[name] = (np.array(a), np.array(num))
    for p in params.values():
        p.grad = None
    return out
