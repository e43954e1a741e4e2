"""Dense tensors with taped reverse-mode differentiation.

Everything is backed by contiguous row-major numpy buffers in float32
(float64 is reserved for finite-difference gradient checking). Each op
records a node on an implicit tape; `backward` replays the nodes in
strict reverse execution order exactly once. Non-differentiable inputs
(integer ids, binary masks) are passed as plain numpy arrays.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_SEQ = itertools.count()
_GRAD_ENABLED = True
_FINITE_CHECKS = True

FLOAT_DTYPES = (np.float32, np.float64)


class TapeNode:
    """One recorded op: inputs, output, and the backward rule."""

    __slots__ = ("op", "inputs", "out", "backward_fn", "seq", "released")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn
        self.seq = next(_SEQ)
        self.released = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_finite_checks(on: bool):
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(on)


@contextlib.contextmanager
def finite_checks(on: bool):
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(on)
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _check_finite(arr, op):
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


def _result(op, out_data, inputs, backward_fn):
    """Wrap an op output, recording a tape node when gradients are live."""
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out_data = np.asarray(out_data)
    out.data = out_data if out_data.ndim == 0 else np.ascontiguousarray(out_data)
    out.grad = None
    out.node = None
    tracked = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out.requires_grad = tracked
    if tracked:
        out.node = TapeNode(op, inputs, out, backward_fn)
    return out


def _same_float_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ValueError(f"dtype mismatch: {dt} vs {t.dtype}")
    return dt


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into all requires_grad leaves.

    Nodes are replayed in strict reverse execution order exactly once;
    replaying the same subgraph again without re-taping is an error.
    """
    if loss.size != 1:
        raise ValueError("backward requires a scalar loss")
    if loss.node is None:
        raise RuntimeError("loss is detached from the tape (no recorded ops)")

    nodes = []
    seen = set()
    stack = [loss.node]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if n.released:
            raise RuntimeError("backward was already called over part of this tape; re-run the forward pass")
        nodes.append(n)
        for t in n.inputs:
            if t.node is not None:
                stack.append(t.node)
    nodes.sort(key=lambda n: n.seq, reverse=True)

    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for n in nodes:
        n.released = True
        g = grads.pop(id(n.out), None)
        if g is None:
            continue
        in_grads = n.backward_fn(g)
        for t, ig in zip(n.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad = ig if t.grad is None else t.grad + ig
            else:
                key = id(t)
                grads[key] = ig if key not in grads else grads[key] + ig


def zero_grads(params):
    for _, p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _sum_leading(g, shape):
    """Reduce a gradient back to a trailing-broadcast operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may match a trailing suffix of a's shape (leading broadcast)."""
    _same_float_dtype(a, b)
    if a.shape != b.shape and a.shape[a.ndim - b.ndim:] != b.shape:
        raise ValueError(f"add shapes incompatible: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g):
        return g, _sum_leading(g, b.shape)

    return _result("add", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_float_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _result("mul", ad * bd, (a, b), bwd)


def mul_const(a: Tensor, arr) -> Tensor:
    """Multiply by a constant array broadcastable into a's shape (no grad for arr)."""
    arr = np.asarray(arr, dtype=a.dtype)
    if np.broadcast_shapes(a.shape, arr.shape) != a.shape:
        raise ValueError("constant factor must broadcast into the tensor shape")

    def bwd(g):
        return (g * arr,)

    return _result("mul_const", a.data * arr, (a,), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _result("scale", a.data * s, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _result("tanh", out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _result("sigmoid", out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _result("relu", out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ValueError(f"reshape element count mismatch: {a.shape} -> {shape}")
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _result("reshape", a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    _same_float_dtype(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result("concat", out, tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError("narrow range out of bounds")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[idx] = g
        return (full,)

    return _result("narrow", a.data[idx].copy(), (a,), bwd)


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast up to `shape` (right-aligned, src dims equal or 1); grad sums back."""
    shape = tuple(int(s) for s in shape)
    src = (1,) * (len(shape) - a.ndim) + a.shape
    if len(src) != len(shape) or any(s != t and s != 1 for s, t in zip(src, shape)):
        raise ValueError(f"cannot expand {a.shape} to {shape}")
    summed_axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s == 1 and t != 1)

    def bwd(g):
        g = g.sum(axis=summed_axes, keepdims=True) if summed_axes else g
        return (g.reshape(a.shape),)

    return _result("expand", np.broadcast_to(a.data.reshape(src), shape).copy(), (a,), bwd)


def embed_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a [V, E] table; gradient scatters back into the rows."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("embedding ids must be integers")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding id out of range [0, {v})")

    def bwd(g):
        dt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)

    return _result("embed_lookup", table.data[ids], (table,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    _same_float_dtype(a, b)
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _result("matmul", ad @ bd, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis, broadcasting over leading axes."""
    _same_float_dtype(x, w, b)
    din, dout = w.shape
    if x.shape[-1] != din or b.shape != (dout,):
        raise ValueError(f"linear shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out = (x2 @ w.data + b.data).reshape(lead + (dout,))

    def bwd(g):
        g2 = g.reshape(-1, dout)
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return _result("linear", out, (x, w, b), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    _same_float_dtype(x, gain, bias)
    e = x.shape[-1]
    if gain.shape != (e,) or bias.shape != (e,):
        raise ValueError("layer_norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def bwd(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", out, (x, gain, bias), bwd)


def masked_softmax(scores: Tensor, allowed) -> Tensor:
    """Softmax over the last axis with disallowed entries fixed at exactly zero.

    `allowed` is a boolean array broadcastable to the scores shape; each row
    must keep at least one allowed entry. Masked positions get probability
    0.0 bitwise, so outputs are invariant to the masked scores.
    """
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), scores.shape)
    if not allowed.any(axis=-1).all():
        raise ValueError("softmax mask disallows an entire row")
    x = np.where(allowed, scores.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result("masked_softmax", p, (scores,), bwd)


# ---------------------------------------------------------------------------
# convolution


def conv2d_masked(x: Tensor, w: Tensor, mask, b: Tensor) -> Tensor:
    """Same-size cross-correlation with a binary weight mask.

    The effective kernel is `w * mask`; masked entries also receive zero
    gradient, so they never change under training.
    """
    _same_float_dtype(x, w, b)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d_masked expects x[N,C,H,W] and w[O,C,k,k]")
    o, c, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    if x.shape[1] != c or b.shape != (o,):
        raise ValueError(f"conv2d_masked shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if m.shape != w.shape:
        raise ValueError("mask shape must match weight shape")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    m = m.astype(w.dtype)

    n, _, h, wd = x.shape
    p = kh // 2
    xpad = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=x.dtype)
    xpad[:, :, p:p + h, p:p + wd] = x.data
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))  # [N,C,H,W,k,k]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * wd, c * kh * kw)
    weff = (w.data * m).reshape(o, -1)
    out = (cols @ weff.T + b.data).reshape(n, h, wd, o).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * wd, o)
        dw = (g2.T @ cols).reshape(w.shape) * m
        db = g2.sum(axis=0)
        dcols = (g2 @ weff).reshape(n, h, wd, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxpad = np.zeros_like(xpad)
        for i in range(kh):
            for j in range(kw):
                dxpad[:, :, i:i + h, j:j + wd] += dcols[:, :, i, j]
        return dxpad[:, :, p:p + h, p:p + wd], dw, db

    return _result("conv2d_masked", out, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# losses and reductions


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-element categorical cross-entropy in nats: -log softmax(logits)[target].

    Stabilized by max-subtraction; gradient is softmax minus one-hot. Reduce
    with `tmean` / `tsum` for a scalar training loss.
    """
    targets = np.asarray(targets)
    if not np.issubdtype(targets.dtype, np.integer):
        raise ValueError("targets must be integer class indices")
    k = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {targets.shape} must match logit rows {logits.shape[:-1]}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target class out of range [0, {k})")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)
    loss = (lse - picked)[..., 0]

    def bwd(g):
        soft = np.exp(z - lse)
        sub = np.take_along_axis(soft, targets[..., None], axis=-1) - 1.0
        np.put_along_axis(soft, targets[..., None], sub, axis=-1)
        return (soft * g[..., None],)

    return _result("softmax_cross_entropy", loss, (logits,), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return _result("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    inv = 1.0 / a.size

    def bwd(g):
        return (np.full(a.shape, g * inv, dtype=a.dtype),)

    return _result("mean", np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype), (a,), bwd)
