"""Dense-tensor engine with define-by-run reverse-mode differentiation.

Tensors wrap numpy arrays. Every operation that has a differentiable input
records its parents and a vector-Jacobian closure on the output tensor; the
resulting parent links form the computation record that ``backward`` replays
in reverse topological order. The graph is rebuilt on every forward pass, so
data-dependent control flow (masking that changes per step) needs no special
handling.

Gradient accumulation is additive: repeated backward passes sum contributions
into ``.grad``. Stop-gradient barriers are tensors with no recorded parents,
so they contribute exactly zero.

float64 is the default dtype; float32 is accepted for speed during training.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

_FLOAT_DTYPES = (np.float32, np.float64)


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense real array, optionally participating in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _coerce(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

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

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; scalars become constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, _as_tensor(1.0 / other, self.dtype))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _from_op(data: np.ndarray, parents, vjp, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Barrier: same values, no parents, zero gradient contribution."""
    return Tensor(x.data, requires_grad=False)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    The loss must be scalar. Each node is visited exactly once per call, in
    reverse topological order; per-call contributions are summed into any
    gradients already present.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # iterative post-order topological sort over parent links
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # flow holds this pass's contribution only; stale .grad never re-propagates
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flow:
                flow[key] = flow[key] + pg
            else:
                flow[key] = pg


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _from_op(data, (a, b), vjp, "add")


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)
    return _from_op(data, (a, b), vjp, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent
    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1),)
    return _from_op(data, (a,), vjp, "pow")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)
    return _from_op(data, (a, b), vjp, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)
    def vjp(g):
        return (g.reshape(x.data.shape),)
    return _from_op(data, (x,), vjp, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    data = np.transpose(x.data, axes)
    def vjp(g):
        return (np.transpose(g, np.argsort(axes) if axes is not None else None),)
    return _from_op(data, (x,), vjp, "transpose")


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts))
        )
    return _from_op(data, tuple(parts), vjp, "concat")


def take(x: Tensor, index) -> Tensor:
    """Advanced indexing ``x[index]``; backward scatter-adds into x.

    ``index`` is an integer array (axis-0 rows) or a tuple of integer arrays.
    """
    data = x.data[index]
    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)
    return _from_op(data, (x,), vjp, "take")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)
    return _from_op(data, (x,), vjp, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.data.shape[i] for i in axis]))
    else:
        n = x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n, x.dtype))


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)
    def vjp(g):
        return (g * (x.data > 0),)
    return _from_op(data, (x,), vjp, "relu")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU with the usual fixed constants."""
    u = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)
    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du),)
    return _from_op(data, (x,), vjp, "gelu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    def vjp(g):
        return (g * (1.0 - t ** 2),)
    return _from_op(t, (x,), vjp, "tanh")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    def vjp(g):
        return (g * e,)
    return _from_op(e, (x,), vjp, "exp")


def log(x: Tensor) -> Tensor:
    def vjp(g):
        return (g / x.data,)
    return _from_op(np.log(x.data), (x,), vjp, "log")


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    def vjp(g):
        return (g * s * (1.0 - s),)
    return _from_op(s, (x,), vjp, "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax, computed with max subtraction for stability."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    def vjp(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)
    return _from_op(y, (x,), vjp, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-vector normalization over the last axis, then affine."""
    c = x.data.shape[-1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise DimensionError(
            f"layer_norm affine params must have shape ({c},), got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd
    data = xhat * gain.data + bias.data
    def vjp(g):
        dxhat = g * gain.data
        dx = istd / c * (
            c * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _from_op(data, (x, gain, bias), vjp, "layer_norm")


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    t = np.asarray(targets)
    b, n = logits.data.shape
    if t.shape != (b,):
        raise DimensionError(f"targets must have shape ({b},), got {t.shape}")
    if t.min() < 0 or t.max() >= n:
        raise IndexError(f"target index out of range [0, {n})")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True)) + m
    losses = lse[:, 0] - logits.data[np.arange(b), t]
    def vjp(g):
        p = np.exp(logits.data - lse)
        p[np.arange(b), t] -= 1.0
        return (g * p / b,)
    return _from_op(np.asarray(losses.mean(), dtype=logits.dtype), (logits,), vjp, "cross_entropy")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.data.shape:
        raise DimensionError(f"targets shape {y.shape} != logits shape {logits.data.shape}")
    z = logits.data
    losses = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    def vjp(g):
        s = 1.0 / (1.0 + np.exp(-z))
        return (g * (s - y) / n,)
    return _from_op(np.asarray(losses.mean(), dtype=logits.dtype), (logits,), vjp, "bce")


def straight_through(x: Tensor, values: np.ndarray) -> Tensor:
    """Forward the given values; backward passes the gradient to x unchanged.

    Implements the surrogate x + sg[values - x]: the output equals ``values``
    exactly while the Jacobian w.r.t. x is the identity. ``values`` never
    receives gradient.
    """
    if values.shape != x.data.shape:
        raise DimensionError(f"straight_through shape mismatch: {values.shape} != {x.data.shape}")
    def vjp(g):
        return (g,)
    return _from_op(np.array(values, dtype=x.dtype, copy=True), (x,), vjp, "straight_through")


# convolution geometry caches keyed by (input shape, kernel, stride, pad)
_COL_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _col_indices(cin, hp, wp, kh, kw, oh, ow, stride):
    key = (cin, hp, wp, kh, kw, oh, ow, stride)
    idx = _COL_INDEX_CACHE.get(key)
    if idx is None:
        # flat indices into (cin*hp*wp) for each (oh*ow, cin*kh*kw) column entry
        ci, ki, kj = np.meshgrid(np.arange(cin), np.arange(kh), np.arange(kw), indexing="ij")
        patch = (ci * hp * wp + ki * wp + kj).reshape(-1)  # (cin*kh*kw,)
        oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        base = (oi * stride * wp + oj * stride).reshape(-1)  # (oh*ow,)
        idx = (base[:, None] + patch[None, :]).astype(np.int64)
        _COL_INDEX_CACHE[key] = idx
    return idx


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, square stride/padding.

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,).
    """
    bsz, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = h + 2 * pad, wd + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    idx = _col_indices(cin, hp, wp, kh, kw, oh, ow, stride)
    cols = xp.reshape(bsz, cin * hp * wp)[:, idx]  # (B, oh*ow, cin*kh*kw)
    wflat = w.data.reshape(cout, -1)
    out = cols @ wflat.T + b.data  # (B, oh*ow, cout)
    out = out.transpose(0, 2, 1).reshape(bsz, cout, oh, ow)

    def vjp(g):
        gflat = g.reshape(bsz, cout, oh * ow).transpose(0, 2, 1)  # (B, oh*ow, cout)
        gw = np.einsum("bpc,bpk->ck", gflat, cols).reshape(w.data.shape)
        gb = gflat.sum(axis=(0, 1))
        gcols = gflat @ wflat  # (B, oh*ow, cin*kh*kw)
        # scatter columns back into the padded input, one bincount per batch
        span = cin * hp * wp
        offsets = (np.arange(bsz, dtype=np.int64) * span)[:, None, None]
        flat_idx = (idx[None, :, :] + offsets).reshape(-1)
        gxp = np.bincount(flat_idx, weights=gcols.reshape(-1).astype(np.float64), minlength=bsz * span)
        gxp = gxp.reshape(bsz, cin, hp, wp).astype(x.dtype)
        gx = gxp[:, :, pad: pad + h, pad: pad + wd] if pad else gxp
        return gx, gw, gb

    return _from_op(out, (x, w, b), vjp, "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; spatial dims must be even."""
    bsz, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {x.data.shape}")
    win = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        bsz, c, h // 2, w // 2, 4
    )
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    def vjp(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        return (
            gwin.reshape(bsz, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(bsz, c, h, w),
        )
    return _from_op(out, (x,), vjp, "maxpool2x2")
