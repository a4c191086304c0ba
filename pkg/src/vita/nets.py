"""Network components: vision encoder, action autoencoder, velocity field.

All parameters are float64 Tensors; `cast(np.float32)` converts a module
in place for the benchmark fast path.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ContractError, DimensionError


def trunc_normal(rng, shape, std):
    """Truncated normal at +-2 std, fan-in scaled by the caller."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=bad.sum())
        bad = np.abs(x) > 2 * std
    return x


class Module:
    def parameters(self):
        """Ordered (name, Tensor) pairs."""
        out = []
        for attr, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((attr, val))
            elif isinstance(val, Module):
                out.extend((f"{attr}.{n}", t) for n, t in val.parameters())
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend((f"{attr}.{i}.{n}", t) for n, t in item.parameters())
        return out

    def param_count(self):
        return sum(t.data.size for _, t in self.parameters())

    def cast(self, dtype):
        for _, t in self.parameters():
            t.data = t.data.astype(dtype)
        return self

    def state_dict(self):
        return {n: t.data for n, t in self.parameters()}

    def load_state_dict(self, arrays, prefix=""):
        for name, t in self.parameters():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"missing parameter {key!r} in checkpoint")
            if arrays[key].shape != t.data.shape:
                raise DimensionError(
                    f"parameter {key!r}: checkpoint shape {arrays[key].shape} "
                    f"!= model shape {t.data.shape}"
                )
            t.data = arrays[key].astype(t.data.dtype)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero_init=False):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = trunc_normal(rng, (n_in, n_out), 1.0 / math.sqrt(n_in))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)


class Mlp(Module):
    """Plain MLP; no activation after the final layer."""

    def __init__(self, widths, rng, activation="gelu", zero_final=False):
        if len(widths) < 3:
            raise ContractError("MLP needs at least one hidden layer")
        self.layers = [
            Linear(widths[i], widths[i + 1], rng,
                   zero_init=(zero_final and i == len(widths) - 2))
            for i in range(len(widths) - 1)
        ]
        self.act = ad.ACTIVATIONS[activation]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)


TIME_EMBED_WIDTH = 32

_FREQ_CACHE = {}


def time_embed(t, width=TIME_EMBED_WIDTH, dtype=np.float64):
    """Sinusoidal embedding of t in [0,1]; frequencies geometric in [1, 1000].

    Accepts a scalar or a [B] array; returns [width] or [B, width].
    """
    t = np.asarray(t, dtype=dtype)
    if np.any(t < 0) or np.any(t > 1):
        raise ContractError(f"time value outside [0, 1]: {t}")
    half = width // 2
    key = (half, np.dtype(dtype).str)
    freqs = _FREQ_CACHE.get(key)
    if freqs is None:
        freqs = np.geomspace(1.0, 1000.0, half).astype(dtype)
        _FREQ_CACHE[key] = freqs
    ang = 2.0 * np.pi * np.multiply.outer(t, freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class VisionEncoder(Module):
    """Stride-2 conv stem over an HxWxC image plus projection MLP to D_latent.

    Optional proprioceptive vector is concatenated before projection.
    """

    CHANNELS = (16, 32, 64, 64)
    KERNELS = (3, 3, 3, 3)
    PADS = (1, 1, 1, 1)

    def __init__(self, image_hw, channels_in, d_latent, rng,
                 proprio_dim=0, hidden=256, activation="gelu"):
        h, w = image_hw
        if h % 16 or w % 16:
            raise ContractError("image height/width must be divisible by 16")
        self.image_hw = (h, w)
        self.channels_in = channels_in
        self.proprio_dim = proprio_dim
        self.d_latent = d_latent
        cs = (channels_in,) + self.CHANNELS
        self.convs_w = [
            Tensor(trunc_normal(rng, (k, k, cs[i], cs[i + 1]),
                                1.0 / math.sqrt(k * k * cs[i])),
                   requires_grad=True)
            for i, k in enumerate(self.KERNELS)
        ]
        self.convs_b = [Tensor(np.zeros(cs[i + 1]), requires_grad=True) for i in range(4)]
        flat = (h // 16) * (w // 16) * self.CHANNELS[-1]
        self.proj = Mlp([flat + proprio_dim, hidden, d_latent], rng, activation)
        self.act = ad.ACTIVATIONS[activation]

    def parameters(self):
        out = []
        for i in range(4):
            out.append((f"conv{i}.w", self.convs_w[i]))
            out.append((f"conv{i}.b", self.convs_b[i]))
        out.extend((f"proj.{n}", t) for n, t in self.proj.parameters())
        return out

    def __call__(self, image, proprio=None):
        """image: Tensor [B,H,W,C] float in [-0.5, 0.5]; proprio: Tensor [B,P]."""
        b, h, w, c = image.data.shape
        if (h, w) != self.image_hw or c != self.channels_in:
            raise DimensionError(
                f"image shape {(h, w, c)} does not match configured "
                f"{self.image_hw + (self.channels_in,)}"
            )
        x = image
        for wk, bk, p in zip(self.convs_w, self.convs_b, self.PADS):
            x = self.act(ad.conv2d(x, wk, bk, stride=2, pad=p))
        x = ad.reshape(x, (b, -1))
        if self.proprio_dim:
            if proprio is None or proprio.data.shape != (b, self.proprio_dim):
                raise DimensionError(
                    f"proprio shape mismatch: expected ({b}, {self.proprio_dim})"
                )
            x = ad.concat([x, proprio], axis=1)
        return self.proj(x)


class ActionEncoder(Module):
    """Maps a flattened action chunk to a latent; deterministic or variational."""

    LOGVAR_CLAMP = 10.0

    def __init__(self, t_pred, d_action, d_latent, rng,
                 hidden=256, n_hidden=3, activation="gelu", variational=True):
        self.t_pred = t_pred
        self.d_action = d_action
        self.d_latent = d_latent
        self.variational = variational
        flat = t_pred * d_action
        out = 2 * d_latent if variational else d_latent
        self.mlp = Mlp([flat] + [hidden] * n_hidden + [out], rng, activation)

    def __call__(self, actions, rng=None, mode=None, eps=None):
        """actions: Tensor [B, T*D]. Returns (z, mu, logvar); mu/logvar are None
        in deterministic mode.

        mode: 'sample' (default when variational) draws z = mu + sigma*eps,
        'mean' returns mu. eps overrides the draw (for gradient checks).
        """
        if actions.data.shape[1] != self.t_pred * self.d_action:
            raise DimensionError(
                f"action chunk width {actions.data.shape[1]} != "
                f"{self.t_pred}*{self.d_action}"
            )
        h = self.mlp(actions)
        if not self.variational:
            return h, None, None
        mu = _take_half(h, self.d_latent, 0)
        logvar = ad.clip(_take_half(h, self.d_latent, 1),
                         -self.LOGVAR_CLAMP, self.LOGVAR_CLAMP)
        if mode == "mean":
            return mu, mu, logvar
        if eps is None:
            eps = rng.standard_normal(mu.data.shape)
        sigma = ad.exp(ad.mul(logvar, 0.5))
        z = ad.add(mu, ad.mul(sigma, Tensor(eps)))
        return z, mu, logvar


def _take_half(h, d, which):
    """Split [B, 2d] into halves with a gradient-correct slice."""
    return ad.slice_cols(h, which * d, (which + 1) * d)


class ActionDecoder(Module):
    def __init__(self, t_pred, d_action, d_latent, rng,
                 hidden=256, n_hidden=3, activation="gelu"):
        self.t_pred = t_pred
        self.d_action = d_action
        self.d_latent = d_latent
        self.mlp = Mlp([d_latent] + [hidden] * n_hidden + [t_pred * d_action],
                       rng, activation)

    def __call__(self, z):
        """z: Tensor [B, D_latent] -> Tensor [B, T*D] (flattened chunk)."""
        if z.data.shape[1] != self.d_latent:
            raise DimensionError(
                f"latent width {z.data.shape[1]} != {self.d_latent}"
            )
        return self.mlp(z)


class VelocityNet(Module):
    """v(z_t, t): MLP over [z_t, time_embed(t)]; final layer zero-initialized
    so the untrained flow is the identity map."""

    def __init__(self, d_latent, rng, hidden=256, n_hidden=3, activation="gelu"):
        self.d_latent = d_latent
        self.mlp = Mlp([d_latent + TIME_EMBED_WIDTH] + [hidden] * n_hidden + [d_latent],
                       rng, activation, zero_final=True)

    def __call__(self, z, t):
        """z: Tensor [B, D_latent]; t: scalar in [0,1] or array [B]."""
        if z.data.shape[1] != self.d_latent:
            raise DimensionError(f"latent width {z.data.shape[1]} != {self.d_latent}")
        emb = time_embed(t, dtype=z.data.dtype)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (z.data.shape[0], emb.shape[0]))
        x = ad.concat([z, Tensor(np.ascontiguousarray(emb))], axis=1)
        return self.mlp(x)


class MatrixUpsampler:
    """Fixed seeded orthonormal-column map between flattened action chunks and
    the latent space; the transpose is an exact left inverse."""

    def __init__(self, t_pred, d_action, d_latent, seed=0):
        flat = t_pred * d_action
        if flat > d_latent:
            raise ContractError(
                f"action chunk dim {flat} exceeds latent dim {d_latent}"
            )
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((d_latent, flat)))
        self.q = Tensor(q)  # [D_latent, flat], orthonormal columns
        self.t_pred = t_pred
        self.d_action = d_action
        self.d_latent = d_latent

    def upsample(self, actions):
        """[B, T*D] -> [B, D_latent]."""
        return ad.matmul(actions, ad.transpose(self.q))

    def downsample(self, z):
        """[B, D_latent] -> [B, T*D]."""
        return ad.matmul(z, self.q)

    def parameters(self):
        return []

    def param_count(self):
        return 0

    def cast(self, dtype):
        self.q.data = self.q.data.astype(dtype)
        return self
