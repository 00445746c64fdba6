"""Dense f64 tensors with tape-based reverse-mode autodiff, plus a seeded RNG.

The tensor here is deliberately small: row-major numpy storage, 2-D matmul,
and exactly the broadcasting the model needs (a length-d vector against the
rows of an n-by-d matrix). Everything else is explicit so the gradient code
stays auditable.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used during sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """n-dimensional f64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # convenience arithmetic
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward):
    """Create an op result, recording the tape edge when gradients are live."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _is_rowvec_broadcast(a_shape, b_shape):
    return len(a_shape) == 2 and b_shape == (a_shape[1],)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def bw(g):
            a._accumulate(g)
            b._accumulate(g)
        return _make(a.data + b.data, (a, b), bw)
    if _is_rowvec_broadcast(a.shape, b.shape):
        def bw(g):
            a._accumulate(g)
            b._accumulate(g.sum(axis=0))
        return _make(a.data + b.data, (a, b), bw)
    if b.shape == ():
        def bw(g):
            a._accumulate(g)
            b._accumulate(np.asarray(g.sum()))
        return _make(a.data + b.data, (a, b), bw)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b):
    return add(a, mul(b, -1.0))


def mul(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)

        def bw(g):
            a._accumulate(g * c)
        return _make(a.data * c, (a,), bw)
    b = _as_tensor(b)
    if a.shape == b.shape:
        def bw(g):
            a._accumulate(g * b.data)
            b._accumulate(g * a.data)
        return _make(a.data * b.data, (a, b), bw)
    if _is_rowvec_broadcast(a.shape, b.shape):
        def bw(g):
            a._accumulate(g * b.data)
            b._accumulate((g * a.data).sum(axis=0))
        return _make(a.data * b.data, (a, b), bw)
    raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bw)


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")

    def bw(g):
        a._accumulate(g.T)
    return _make(a.data.T.copy(), (a,), bw)


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)

    def bw(g):
        a._accumulate(g.reshape(a.shape))
    return _make(a.data.reshape(shape), (a,), bw)


def tsum(a):
    a = _as_tensor(a)

    def bw(g):
        a._accumulate(np.full_like(a.data, float(g)))
    return _make(np.asarray(a.data.sum()), (a,), bw)


def tmean(a):
    a = _as_tensor(a)
    n = a.data.size

    def bw(g):
        a._accumulate(np.full_like(a.data, float(g) / n))
    return _make(np.asarray(a.data.mean()), (a,), bw)


def square(a):
    return mul(a, a)


def softmax(x):
    """Numerically stable softmax along the last axis."""
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ContractError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        x._accumulate((g - dot) * s)
    return _make(s, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-6):
    """Row-wise normalization of an n-by-d matrix followed by an affine map."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: expected 2-D input, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} "
            f"do not match width {d}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = y * gain.data + bias.data

    def bw(g):
        dy = g * gain.data
        gx = (dy - dy.mean(axis=1, keepdims=True)
              - y * (dy * y).mean(axis=1, keepdims=True)) * inv
        x._accumulate(gx)
        gain._accumulate((g * y).sum(axis=0))
        bias._accumulate(g.sum(axis=0))
    return _make(out, (x, gain, bias), bw)


_GELU_S = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu(x):
    """Elementwise x * Phi(x) in the tanh approximation."""
    x = _as_tensor(x)
    u = _GELU_S * (x.data + _GELU_C * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def bw(g):
        du = _GELU_S * (1.0 + 3.0 * _GELU_C * x.data ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
        x._accumulate(g * dx)
    return _make(out, (x,), bw)


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat: empty input list")
    if any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat: all parts must be 2-D")
    other = 1 - axis
    ref = parts[0].shape[other]
    for p in parts:
        if p.shape[other] != ref:
            raise ShapeError(
                f"concat: mismatched widths {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accumulate(g[lo:hi] if axis == 0 else g[:, lo:hi])
    return _make(np.concatenate([p.data for p in parts], axis=axis),
                 parts, bw)


def split(x, sizes, axis=0):
    x = _as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(
            f"split: sizes {sizes} do not cover axis {axis} of {x.shape}")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        lo, hi = int(lo), int(hi)
        piece = x.data[lo:hi] if axis == 0 else x.data[:, lo:hi]

        def bw(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            if axis == 0:
                full[lo:hi] = g
            else:
                full[:, lo:hi] = g
            x._accumulate(full)
        outs.append(_make(piece.copy(), (x,), bw))
    return outs


def concat_tokens(streams):
    """Concatenate token matrices along the token dimension."""
    return concat(streams, axis=0)


def split_tokens(x, sizes):
    """Inverse of concat_tokens."""
    return split(x, sizes, axis=0)


def permute_flat(x, perm, out_shape):
    """Reorder the flattened elements of x by `perm` and reshape.

    perm[i] gives the source flat index of output element i; used by
    unpatchify, where the mapping is a pure permutation.
    """
    x = _as_tensor(x)
    perm = np.asarray(perm, dtype=np.intp)
    if perm.size != x.data.size or int(np.prod(out_shape)) != x.data.size:
        raise ShapeError("permute_flat: size mismatch")
    out = x.data.reshape(-1)[perm].reshape(out_shape)

    def bw(g):
        gx = np.zeros(x.data.size)
        gx[perm] = g.reshape(-1)
        x._accumulate(gx.reshape(x.shape))
    return _make(out, (x,), bw)


def backward(loss):
    """Accumulate d loss / d leaf into every requires_grad tensor on the tape."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward: loss must be a scalar tensor")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f must be a deterministic builder mapping a tensor to a scalar tensor.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    xt = Tensor(x.data.copy() if isinstance(x, Tensor) else x,
                requires_grad=True)
    loss = f(xt)
    backward(loss)
    analytic = xt.grad.reshape(-1).copy()

    flat = xt.data.reshape(-1)
    max_rel = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(xt.data.copy())).item()
            flat[i] = orig - eps
            fm = f(Tensor(xt.data.copy())).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            rel = abs(analytic[i] - numeric) / (abs(numeric) + 1e-12)
            max_rel = max(max_rel, rel)
    return max_rel


def grad_check_leaves(loss_fn, leaves, eps=1e-5, max_entries=None, seed=0):
    """Max relative error over several leaf tensors of a zero-arg loss builder.

    loss_fn must be deterministic and close over the given leaves; entries
    are perturbed in place for the central differences. With max_entries set,
    a seeded random subset of entries per leaf is checked.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"grad_check_leaves: eps {eps} outside "
                            f"[1e-7, 1e-3]")
    for t in leaves:
        t.zero_grad()
    backward(loss_fn())
    grads = [(t.grad if t.grad is not None
              else np.zeros_like(t.data)).reshape(-1).copy() for t in leaves]
    picker = np.random.default_rng(seed)
    max_rel = 0.0
    with no_grad():
        for t, g in zip(leaves, grads):
            flat = t.data.reshape(-1)
            if max_entries is not None and flat.size > max_entries:
                idxs = picker.choice(flat.size, max_entries, replace=False)
            else:
                idxs = range(flat.size)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                fp = loss_fn().item()
                flat[i] = orig - eps
                fm = loss_fn().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                rel = abs(g[i] - numeric) / (abs(numeric) + 1e-12)
                max_rel = max(max_rel, rel)
    return max_rel


class Rng:
    """Counter-based seeded RNG with order-independent named substreams."""

    def __init__(self, seed, _stream=()):
        self.seed = int(seed)
        self._stream = tuple(_stream)
        key = np.random.SeedSequence(
            (self.seed,) + tuple(_hash_part(p) for p in self._stream))
        self._gen = np.random.Generator(np.random.Philox(key))

    def split(self, *ids):
        """Independent substream; splitting is order-independent by id."""
        return Rng(self.seed, self._stream + ids)

    def normal(self, shape=()):
        return self._gen.standard_normal(size=shape)

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high, shape=None):
        out = self._gen.integers(low, high, size=shape)
        return out if shape is not None else int(out)


def _hash_part(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    # stable string hash (builtin hash is salted per process)
    h = 2166136261
    for ch in str(part).encode("utf-8"):
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h
