"""Dense tensors with tape-based reverse-mode autodiff.

The tape records every op whose inputs require grad; backward() replays it
in reverse insertion order. Intermediate gradients live in a scratch dict
during the sweep, leaf gradients accumulate into Tensor.grad (so calling
backward twice without zeroing doubles them). Training runs in float64;
inference may run in float32 with the tape disabled.
"""

import math

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Append-only op record; cleared by the caller between steps."""

    def __init__(self):
        self.nodes = []
        self.enabled = True

    def record(self, out, parents, vjp):
        if self.enabled and any(p.requires_grad or p._on_tape for p in parents):
            out._on_tape = True
            self.nodes.append(_Node(out, parents, vjp))

    def clear(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()


def tape():
    return _TAPE


class no_grad:
    """Context manager disabling tape recording (inference fast path)."""

    def __enter__(self):
        self._prev = _TAPE.enabled
        _TAPE.enabled = False
        return self

    def __exit__(self, *exc):
        _TAPE.enabled = self._prev
        return False


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_on_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._on_tape = False

    # -- housekeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic --------------------------------------------------------

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

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        # numpy broadcasting is allowed; reject only incompatible shapes
        try:
            np.broadcast_shapes(a.data.shape, b.data.shape)
        except ValueError:
            raise DimensionError(
                f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}"
            )


# -- elementwise ops -------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    _TAPE.record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(g, b.data.shape)))
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    _TAPE.record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(-g, b.data.shape)))
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    _TAPE.record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                         _unbroadcast(g * a.data, b.data.shape)))
    return out


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0))
    # subgradient 0 at exactly 0
    _TAPE.record(out, (a,), lambda g: (_kernels.relu_backward(a.data, g),))
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximate GELU; runs on conv-sized feature maps, so the heavy
    lifting lives in fused kernels."""
    x = a.data
    y, th = _kernels.gelu_forward(x)
    out = Tensor(y)
    _TAPE.record(out, (a,), lambda g: (_kernels.gelu_backward(x, th, g),))
    return out


def tanh(a):
    y = np.tanh(a.data)
    out = Tensor(y)
    _TAPE.record(out, (a,), lambda g: (g * (1.0 - y * y),))
    return out


def exp(a):
    y = np.exp(a.data)
    out = Tensor(y)
    _TAPE.record(out, (a,), lambda g: (g * y,))
    return out


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y)

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    _TAPE.record(out, (a,), vjp)
    return out


def slice_cols(a, lo, hi):
    """Columns [lo, hi) of a [B, D] tensor."""
    d = a.data.shape[-1]
    if not (0 <= lo < hi <= d):
        raise DimensionError(f"column slice [{lo}, {hi}) out of range for width {d}")
    out = Tensor(a.data[..., lo:hi].copy())

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[..., lo:hi] = g
        return (ga,)

    _TAPE.record(out, (a,), vjp)
    return out


def powconst(a, p):
    y = a.data**p
    out = Tensor(y)
    _TAPE.record(out, (a,), lambda g: (g * p * a.data ** (p - 1),))
    return out


def clip(a, lo, hi):
    """Clamp with pass-through gradient inside [lo, hi], zero outside."""
    y = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    out = Tensor(y)
    _TAPE.record(out, (a,), lambda g: (g * mask,))
    return out


ACTIVATIONS = {"relu": relu, "gelu": gelu, "tanh": tanh}


# -- shape ops -------------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul expects operands of rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.data.shape} vs {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return (ga, gb)

    _TAPE.record(out, (a, b), vjp)
    return out


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(a.data.reshape(shape))
    _TAPE.record(out, (a,), lambda g: (g.reshape(a.data.shape),))
    return out


def transpose(a, axes=None):
    out = Tensor(np.transpose(a.data, axes))
    inv = None if axes is None else np.argsort(axes)
    _TAPE.record(out, (a,), lambda g: (np.transpose(g, inv),))
    return out


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    _TAPE.record(out, tuple(tensors), vjp)
    return out


def tsum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    _TAPE.record(out, (a,), vjp)
    return out


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)

    _TAPE.record(out, (a,), vjp)
    return out


def softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    _TAPE.record(out, (a,), vjp)
    return out


# -- losses ----------------------------------------------------------------


def mse(pred, target):
    """Mean over all elements of squared differences."""
    target = _as_tensor(target, like=pred)
    if pred.data.shape != target.data.shape:
        raise DimensionError(
            f"mse: shapes differ, {pred.data.shape} vs {target.data.shape}"
        )
    diff = sub(pred, target)
    return tmean(mul(diff, diff))


# -- conv ------------------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    """x: [B, H, W, C] -> patches [B, Ho, Wo, kh*kw*C]."""
    return _kernels.im2col(x, kh, kw, stride, pad)


def _col2im(gcols, xshape, kh, kw, stride, pad):
    """Scatter-add patch gradients back to the input image."""
    return _kernels.col2im(gcols, xshape, kh, kw, stride, pad)


def conv2d(x, w, b, stride=2, pad=1):
    """x: [B,H,W,Cin], w: [kh,kw,Cin,Cout], b: [Cout] -> [B,Ho,Wo,Cout]."""
    kh, kw, cin, cout = w.data.shape
    if x.data.shape[-1] != cin:
        raise DimensionError(
            f"conv2d: input channels {x.data.shape[-1]} != kernel channels {cin}"
        )
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(kh * kw * cin, cout)
    y = cols.reshape(-1, kh * kw * cin) @ wmat
    y += b.data
    y = y.reshape(x.data.shape[0], ho, wo, cout)
    out = Tensor(y)

    x_needs_grad = x.requires_grad or x._on_tape

    def vjp(g):
        gflat = g.reshape(-1, cout)
        gw = (cols.reshape(-1, kh * kw * cin).T @ gflat).reshape(w.data.shape)
        gb = gflat.sum(axis=0)
        if not x_needs_grad:  # constant input (e.g. the observation image)
            return (None, gw, gb)
        gcols = (gflat @ wmat.T).reshape(x.data.shape[0], ho, wo, kh * kw * cin)
        gx = _col2im(gcols, x.data.shape, kh, kw, stride, pad)
        return (gx, gw, gb)

    _TAPE.record(out, (x, w, b), vjp)
    return out


# -- backward --------------------------------------------------------------


def backward(loss):
    """Reverse sweep from a scalar loss over the current tape.

    Leaf gradients (tensors not produced by a taped op) accumulate into
    .grad; intermediate gradients are scratch and discarded.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not _TAPE.nodes:
        raise ContractError("backward called with an empty graph")
    scratch = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_TAPE.nodes):
        g = scratch.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if parent._on_tape:
                key = id(parent)
                if key in scratch:
                    scratch[key] = scratch[key] + pg
                else:
                    scratch[key] = pg
            elif parent.requires_grad:
                parent.accumulate_grad(np.asarray(pg))
