"""Conventional conditional flow matching policies: Gaussian-noise source in
the flattened action space, with the observation latent injected at every
solver step through a selectable conditioning mechanism."""

import math
import struct
import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ContractError
from .checkpoint import FormatError, load_tensors, save_tensors
from .flow import ConfigError, SolverConfig, interpolate
from .nets import (Linear, Mlp, Module, TIME_EMBED_WIDTH, VisionEncoder,
                   time_embed, trunc_normal)
from .policy import ACTIVATION_IDS, ModelConfig, Normalizer, _META_FMT, \
    parse_policy_meta

MECHANISMS = ("concat", "film", "adaln", "xattn")
XATTN_TOKENS = 8


layer_norm = ad.layer_norm


class CondVelocityNet(Module):
    """Velocity field over the flattened action chunk, conditioned on the
    observation latent at every call."""

    def __init__(self, flat_dim, cond_dim, rng, hidden=256, n_hidden=3,
                 activation="gelu", mechanism="concat"):
        if mechanism not in MECHANISMS:
            raise ConfigError(f"unknown conditioning mechanism {mechanism!r}")
        self.mechanism = mechanism
        self.flat_dim = flat_dim
        self.cond_dim = cond_dim
        self.hidden = hidden
        self.n_hidden = n_hidden
        self.act = ad.ACTIVATIONS[activation]
        te = TIME_EMBED_WIDTH
        if mechanism == "concat":
            self.mlp = Mlp([flat_dim + cond_dim + te] + [hidden] * n_hidden
                           + [flat_dim], rng, activation, zero_final=True)
            return
        self.inp = Linear(flat_dim + te, hidden, rng)
        self.out = Linear(hidden, flat_dim, rng, zero_init=True)
        self.blocks = [Linear(hidden, hidden, rng) for _ in range(n_hidden)]
        if mechanism == "film":
            # scale/shift regressed from cond; zero-init -> identity modulation
            self.mods = [Linear(cond_dim, 2 * hidden, rng, zero_init=True)
                         for _ in range(n_hidden)]
        elif mechanism == "adaln":
            # scale/shift/gate regressed from cond + time embedding
            self.mods = [Linear(cond_dim + te, 3 * hidden, rng, zero_init=True)
                         for _ in range(n_hidden)]
        else:  # xattn: single-head attention over the cond split into tokens
            if cond_dim % XATTN_TOKENS:
                raise ConfigError("cond width must divide into attention tokens")
            self.tok = cond_dim // XATTN_TOKENS
            self.q = [Linear(hidden, hidden, rng) for _ in range(n_hidden)]
            self.k = [Linear(self.tok, hidden, rng) for _ in range(n_hidden)]
            self.v = [Linear(self.tok, hidden, rng) for _ in range(n_hidden)]
            self.o = [Linear(hidden, hidden, rng, zero_init=True)
                      for _ in range(n_hidden)]

    def __call__(self, x, cond, t):
        """x: Tensor [B, flat]; cond: Tensor [B, cond_dim]; t scalar or [B]."""
        emb = time_embed(t, dtype=x.data.dtype)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (x.data.shape[0], emb.shape[0]))
        temb = Tensor(np.ascontiguousarray(emb))
        if self.mechanism == "concat":
            return self.mlp(ad.concat([x, cond, temb], axis=1))
        h = self.inp(ad.concat([x, temb], axis=1))
        if self.mechanism == "film":
            for blk, mod in zip(self.blocks, self.mods):
                h = self.act(blk(h))
                sb = mod(cond)
                s = _slice_cols(sb, 0, self.hidden)
                b = _slice_cols(sb, self.hidden, 2 * self.hidden)
                h = ad.add(ad.mul(h, ad.add(s, _ones_like(s))), b)
        elif self.mechanism == "adaln":
            ct = ad.concat([cond, temb], axis=1)
            for blk, mod in zip(self.blocks, self.mods):
                sbg = mod(ct)
                s = _slice_cols(sbg, 0, self.hidden)
                b = _slice_cols(sbg, self.hidden, 2 * self.hidden)
                g = _slice_cols(sbg, 2 * self.hidden, 3 * self.hidden)
                u = ad.add(ad.mul(layer_norm(h), ad.add(s, _ones_like(s))), b)
                h = ad.add(h, ad.mul(g, self.act(blk(u))))
        else:
            # pre-norm transformer blocks: cross-attention + feed-forward,
            # each with a residual connection
            bsz = cond.data.shape[0]
            tokens = ad.reshape(cond, (bsz, XATTN_TOKENS, self.tok))
            scale = 1.0 / math.sqrt(self.hidden)
            for qw, kw, vw, ow, blk in zip(self.q, self.k, self.v, self.o,
                                           self.blocks):
                u = layer_norm(h)
                q = ad.reshape(qw(u), (bsz, 1, self.hidden))
                k = _token_linear(tokens, kw)
                v = _token_linear(tokens, vw)
                attn = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))),
                                         scale), axis=-1)
                ctx = ad.reshape(ad.matmul(attn, v), (bsz, self.hidden))
                h = ad.add(h, ow(ctx))
                h = ad.add(h, self.act(blk(layer_norm(h))))
        return self.out(h)


def _token_linear(tokens, lin):
    """Apply a Linear over the last axis of [B, T, d] tokens."""
    b, t, d = tokens.data.shape
    flat = ad.reshape(tokens, (b * t, d))
    return ad.reshape(lin(flat), (b, t, lin.w.data.shape[1]))


def _slice_cols(x, lo, hi):
    return ad.slice_cols(x, lo, hi)


def _ones_like(t):
    return Tensor(np.ones_like(t.data))


class CondFmPolicy:
    """Gaussian-source flow matching policy over normalized action chunks."""

    def __init__(self, cfg: ModelConfig, mechanism, rng, normalizer=None,
                 solver=None, t_exec=8, hidden=None):
        self.cfg = cfg
        self.mechanism = mechanism
        self.flat_dim = cfg.t_pred * cfg.d_action
        self.vision = VisionEncoder(cfg.image_hw, cfg.channels, cfg.d_latent,
                                    rng, proprio_dim=cfg.proprio_dim,
                                    hidden=cfg.vision_hidden,
                                    activation=cfg.activation)
        self.vnet = CondVelocityNet(self.flat_dim, cfg.d_latent, rng,
                                    hidden=hidden or cfg.hidden,
                                    n_hidden=cfg.n_hidden,
                                    activation=cfg.activation,
                                    mechanism=mechanism)
        self.normalizer = normalizer or Normalizer.identity(cfg.d_action)
        self.solver = solver or SolverConfig()
        self.t_exec = t_exec
        self.rng = np.random.default_rng()

    def seed(self, seed):
        self.rng = np.random.default_rng(seed)
        return self

    @property
    def dtype(self):
        return self.vnet.out.w.data.dtype if self.mechanism != "concat" \
            else self.vnet.mlp.layers[0].w.data.dtype

    def parameters(self):
        out = [(f"ev.{n}", t) for n, t in self.vision.parameters()]
        out += [(f"cv.{n}", t) for n, t in self.vnet.parameters()]
        return out

    def param_count(self):
        return sum(t.data.size for _, t in self.parameters())

    def cast(self, dtype):
        for _, t in self.parameters():
            t.data = t.data.astype(dtype)
        return self

    def _prep_obs(self, image, proprio):
        cfg = self.cfg
        dtype = self.dtype
        img = np.asarray(image)
        x = Tensor((img.astype(dtype) / 255.0 - 0.5)[None])
        p = None
        if cfg.proprio_dim:
            p = Tensor(np.asarray(proprio, dtype=dtype).reshape(1, cfg.proprio_dim))
        return x, p

    def act(self, image, proprio=None):
        """Sample a chunk: fresh Gaussian source unless seeded beforehand."""
        with ad.no_grad():
            img, p = self._prep_obs(image, proprio)
            cond = self.vision(img, p)
            z = Tensor(self.rng.standard_normal(
                (1, self.flat_dim)).astype(self.dtype))
            h = 1.0 / self.solver.num_steps
            for k in range(self.solver.num_steps):
                z = ad.add(z, ad.mul(self.vnet(z, cond, k * h), h))
            flat = z.data[0]
        chunk = flat.reshape(self.cfg.t_pred, self.cfg.d_action)
        return self.normalizer.denormalize(chunk)

    def save(self, path):
        cfg = self.cfg
        meta = struct.pack(
            _META_FMT, 2, 0, ACTIVATION_IDS[cfg.activation],
            MECHANISMS.index(self.mechanism),
            cfg.d_latent, cfg.t_pred, self.t_exec, cfg.d_action,
            cfg.image_hw[0], cfg.image_hw[1], cfg.channels, cfg.proprio_dim,
            self.solver.num_steps, self.vnet.hidden, cfg.n_hidden,
            cfg.vision_hidden)
        meta += np.asarray(self.normalizer.mean, "<f4").tobytes()
        meta += np.asarray(self.normalizer.std, "<f4").tobytes()
        save_tensors(path, {n: t.data for n, t in self.parameters()},
                     meta=meta)

    @classmethod
    def load(cls, path, dtype=np.float64):
        arrays, meta = load_tensors(path, dtype=dtype)
        cfg, normalizer, t_exec, steps, mech = parse_policy_meta(meta)
        policy = cls(cfg, MECHANISMS[mech], np.random.default_rng(0),
                     normalizer=normalizer, solver=SolverConfig(steps),
                     t_exec=t_exec, hidden=cfg.hidden)
        policy.cast(dtype)
        for name, t in policy.parameters():
            if name not in arrays:
                raise FormatError(f"checkpoint missing parameter {name!r}")
            t.data = arrays[name].astype(dtype)
        return policy


def cond_fm_loss(policy, images, proprio, actions_norm_flat, rng,
                 t=None, eps=None, zero_cond=False):
    """Straight-path flow matching loss from Gaussian noise to the normalized
    flattened chunks, conditioned on the vision latent."""
    b = actions_norm_flat.data.shape[0]
    if b == 0:
        raise ContractError("empty batch")
    cond = policy.vision(images, proprio)
    if zero_cond:
        cond = ad.mul(cond, 0.0)
    if eps is None:
        eps = rng.standard_normal((b, policy.flat_dim))
    if t is None:
        t = rng.uniform(0.0, 1.0, size=b)
    z0 = Tensor(np.asarray(eps, dtype=np.float64))
    path = interpolate(z0, actions_norm_flat, t)
    pred = policy.vnet(path.z_t, cond, path.t)
    return ad.mse(pred, path.u_t)


def match_params(target_count, build, lo=8, hi=8192, tol=0.05):
    """Pick the hidden width whose built model lands within +-tol of the
    target parameter count; warn and return the nearest width if impossible."""
    best_w, best_gap = None, np.inf
    while lo < hi:
        mid = (lo + hi) // 2
        count = build(mid).param_count()
        gap = abs(count - target_count) / target_count
        if gap < best_gap:
            best_w, best_gap = mid, gap
        if count < target_count:
            lo = mid + 1
        else:
            hi = mid
    for w in (lo - 1, lo, lo + 1):
        if w >= 1:
            gap = abs(build(w).param_count() - target_count) / target_count
            if gap < best_gap:
                best_w, best_gap = w, gap
    if best_gap > tol:
        warnings.warn(
            f"could not match parameter count within {tol:.0%} "
            f"(best gap {best_gap:.1%} at width {best_w})")
    return best_w


def velocity_flops_per_step(policy):
    """Rough multiply-accumulate count of one velocity evaluation (batch 1)."""
    total = 0
    net = policy.vnet if hasattr(policy, "vnet") else policy
    for _, t in (net.parameters() if hasattr(net, "parameters") else []):
        if t.data.ndim == 2:
            total += t.data.size
    if getattr(net, "mechanism", None) == "xattn":
        total += net.n_hidden * 2 * XATTN_TOKENS * net.hidden
    if getattr(net, "mechanism", None) == "adaln":
        total += net.n_hidden * 4 * net.hidden  # layer-norm passes
    return total
