"""Fused inner loops for the training hot path.

numba JIT when available, numpy fallbacks otherwise; both paths compute the
same IEEE operations per element (no fastmath) so results are identical.
"""

import ctypes

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

    def njit(*a, **k):
        def deco(f):
            return f
        return deco

def tune_allocator():
    """Keep large buffers on the heap across free/malloc cycles.

    The training step reallocates tens of MB of im2col/activation arrays
    every iteration; glibc serves blocks this large from fresh mmaps (and
    trims them back on free), costing ~1.5k page faults per step. Raising
    the mmap and trim thresholds lets the heap recycle the pages. Values are
    unaffected; on non-glibc platforms this is a no-op.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):  # pragma: no cover - platform dependent
        pass


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


@njit(cache=True)
def _gelu_inner(x, out):
    for i in range(x.size):
        v = x[i]
        out[i] = _GELU_C * (v + _GELU_A * v * v * v)


@njit(cache=True)
def _gelu_outer(x, th, out):
    for i in range(x.size):
        out[i] = 0.5 * x[i] * (1.0 + th[i])


@njit(cache=True)
def _gelu_grad(x, th, g, out):
    for i in range(x.size):
        v = x[i]
        t = th[i]
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        out[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)


@njit(cache=True)
def _col2im_add(gcols, gx, ho, wo, kh, kw, stride):
    b = gx.shape[0]
    c = gx.shape[3]
    for n in range(b):
        for oy in range(ho):
            for ox in range(wo):
                ys = oy * stride
                xs = ox * stride
                for i in range(kh):
                    for j in range(kw):
                        k0 = (i * kw + j) * c
                        for ch in range(c):
                            gx[n, ys + i, xs + j, ch] += gcols[n, oy, ox, k0 + ch]


@njit(cache=True)
def _relu_grad(x, g, out):
    for i in range(x.size):
        out[i] = g[i] if x[i] > 0.0 else 0.0


def relu_backward(x, g):
    if HAVE_NUMBA:
        out = np.empty(x.size, dtype=x.dtype)
        _relu_grad(np.ascontiguousarray(x).reshape(-1),
                   np.ascontiguousarray(g).reshape(-1), out)
        return out.reshape(x.shape)
    return g * (x > 0.0)


@njit(cache=True)
def _im2col_gather(x, cols, kh, kw, stride, pad):
    b, h, w, c = x.shape
    ho = cols.shape[1]
    wo = cols.shape[2]
    for n in range(b):
        for oy in range(ho):
            ys = oy * stride - pad
            for ox in range(wo):
                xs = ox * stride - pad
                for i in range(kh):
                    yy = ys + i
                    for j in range(kw):
                        xx = xs + j
                        k0 = (i * kw + j) * c
                        if 0 <= yy < h and 0 <= xx < w:
                            for ch in range(c):
                                cols[n, oy, ox, k0 + ch] = x[n, yy, xx, ch]
                        else:
                            for ch in range(c):
                                cols[n, oy, ox, k0 + ch] = 0.0


@njit(cache=True)
def _adam_update(p, g, m, v, lr, b1, b2, eps, c1, c2):
    for i in range(p.size):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def gelu_forward(x):
    """Returns (y, th) with th = tanh(inner) cached for the backward pass."""
    flat = np.ascontiguousarray(x).reshape(-1)
    if HAVE_NUMBA:
        th = np.empty_like(flat)
        _gelu_inner(flat, th)
        np.tanh(th, out=th)
        y = np.empty_like(flat)
        _gelu_outer(flat, th, y)
        return y.reshape(x.shape), th.reshape(x.shape)
    inner = flat * flat
    inner *= _GELU_A
    inner += 1.0
    inner *= flat
    inner *= _GELU_C
    th = np.tanh(inner, out=inner)
    y = th + 1.0
    y *= flat
    y *= 0.5
    return y.reshape(x.shape), th.reshape(x.shape)


def gelu_backward(x, th, g):
    if HAVE_NUMBA:
        out = np.empty(x.size, dtype=x.dtype)
        _gelu_grad(np.ascontiguousarray(x).reshape(-1),
                   np.ascontiguousarray(th).reshape(-1),
                   np.ascontiguousarray(g).reshape(-1), out)
        return out.reshape(x.shape)
    grad = x * x
    grad *= 3.0 * _GELU_A
    grad += 1.0
    grad *= _GELU_C
    sech2 = 1.0 - th * th
    grad *= sech2
    grad *= x
    grad += 1.0
    grad += th
    grad *= 0.5
    grad *= g
    return grad


def im2col(x, kh, kw, stride, pad):
    """Gather k×k patches: [B,H,W,C] -> ([B,Ho,Wo,kh*kw*C], Ho, Wo)."""
    b, h, w, c = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if HAVE_NUMBA:
        cols = np.empty((b, ho, wo, kh * kw * c), dtype=x.dtype)
        _im2col_gather(np.ascontiguousarray(x), cols, kh, kw, stride, pad)
        return cols, ho, wo
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w] = x
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, kh, kw, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    return view.reshape(b, ho, wo, kh * kw * c), ho, wo


def col2im(gcols, xshape, kh, kw, stride, pad):
    """Scatter-add patch gradients back onto the (padded) input image."""
    b, h, w, c = xshape
    gx = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=gcols.dtype)
    ho, wo = gcols.shape[1], gcols.shape[2]
    if HAVE_NUMBA:
        _col2im_add(np.ascontiguousarray(gcols), gx, ho, wo, kh, kw, stride)
    else:
        g6 = gcols.reshape(b, ho, wo, kh, kw, c)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + stride * ho:stride,
                   j:j + stride * wo:stride, :] += g6[:, :, :, i, j, :]
    if pad:
        return gx[:, pad:pad + h, pad:pad + w, :]
    return gx


def adam_update(p, g, m, v, lr, b1, b2, eps, c1, c2):
    """In-place Adam step with bias corrections c1 = 1-b1^t, c2 = 1-b2^t."""
    if HAVE_NUMBA and p.flags.c_contiguous:
        _adam_update(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                     m.reshape(-1), v.reshape(-1), lr, b1, b2, eps, c1, c2)
        return
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
