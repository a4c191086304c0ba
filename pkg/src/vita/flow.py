"""Flow matching core: straight paths, the differentiable Euler solver, and
the composite training objective (flow matching + flow decoding + autoencoder
terms)."""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor, ContractError, DimensionError


class ConfigError(ValueError):
    pass


@dataclass
class SolverConfig:
    num_steps: int = 6

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigError("solver needs at least one step")


FD_VARIANTS = ("reconstruction", "consistency", "none")


@dataclass
class LossWeights:
    fm: float = 1.0
    fd: float = 1.0
    ae: float = 1.0
    fd_variant: str = "reconstruction"
    kl_weight: float = 1e-4

    def __post_init__(self):
        for name in ("fm", "fd", "ae", "kl_weight"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")
        if self.fd_variant not in FD_VARIANTS:
            raise ConfigError(f"unknown fd_variant {self.fd_variant!r}")
        if self.fd_variant == "none" and self.fd > 0:
            raise ConfigError("fd_variant='none' requires a zero flow-decode weight")


@dataclass
class PathSample:
    z_t: Tensor
    t: np.ndarray
    u_t: Tensor


def interpolate(z_0, z_1, t):
    """Straight-path sample: z_t = (1-t) z_0 + t z_1, u_t = z_1 - z_0.

    z_0, z_1: Tensors [B, D]; t: scalar or [B] array in [0, 1].
    """
    if z_0.data.shape != z_1.data.shape:
        raise DimensionError(
            f"endpoint widths differ: {z_0.data.shape} vs {z_1.data.shape}"
        )
    t_arr = np.asarray(t, dtype=z_0.data.dtype)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ContractError("interpolation time outside [0, 1]")
    tc = Tensor(t_arr.reshape(-1, 1) if t_arr.ndim else t_arr)
    z_t = ad.add(ad.mul(z_0, ad.sub(Tensor(np.ones_like(tc.data)), tc)),
                 ad.mul(z_1, tc))
    u_t = ad.sub(z_1, z_0)
    return PathSample(z_t=z_t, t=t_arr, u_t=u_t)


def fm_loss(z_0, z_1, velocity_net, t):
    """Mean squared velocity error along the straight path at the given
    per-sample times (Uniform[0,1] draws during training)."""
    if z_0.data.shape[0] == 0:
        raise ContractError("fm_loss on an empty batch")
    path = interpolate(z_0, z_1, t)
    pred = velocity_net(path.z_t, path.t)
    return ad.mse(pred, path.u_t)


def solve_ode(z_0, velocity_fn, cfg, differentiable=True):
    """Euler integration of dz/dt = v(z, t) from t=0 to t=1.

    velocity_fn maps (Tensor [B, D], t scalar) -> Tensor [B, D]. When
    differentiable, every step stays on the gradient tape.
    """
    h = 1.0 / cfg.num_steps
    if differentiable:
        z = z_0
        for k in range(cfg.num_steps):
            z = ad.add(z, ad.mul(velocity_fn(z, k * h), h))
        return z
    with ad.no_grad():
        z = z_0
        for k in range(cfg.num_steps):
            z = ad.add(z, ad.mul(velocity_fn(z, k * h), h))
        return z


def flow_decode_loss(z_hat, actions_flat, z_1, decode_fn, variant):
    """Supervision on the integrated latent: decode-and-reconstruct, latent
    consistency, or none."""
    if variant == "reconstruction":
        return ad.mse(decode_fn(z_hat), actions_flat)
    if variant == "consistency":
        return ad.mse(z_hat, z_1)
    if variant == "none":
        return Tensor(0.0)
    raise ConfigError(f"unknown fd_variant {variant!r}")


def kl_loss(mu, logvar):
    """Mean over the batch of KL(q || N(0, I)) = 0.5 sum(mu^2 + sigma^2 - logvar - 1)."""
    var = ad.exp(logvar)
    per_dim = ad.sub(ad.add(ad.mul(mu, mu), var),
                     ad.add(logvar, Tensor(np.ones_like(logvar.data))))
    return ad.mul(ad.tmean(ad.tsum(per_dim, axis=1)), 0.5)


def ae_loss(actions_flat, z_1, mu, logvar, decode_fn, kl_weight):
    """Reconstruction (MSE) plus optional KL regularization (variational mode)."""
    recon = ad.mse(decode_fn(z_1), actions_flat)
    if mu is not None and kl_weight > 0:
        return ad.add(recon, ad.mul(kl_loss(mu, logvar), kl_weight)), recon
    return recon, recon


def vita_loss(model, images, proprio, actions_flat, weights, solver,
              rng=None, t=None, eps=None, coupling="paired"):
    """Composite objective over one batch; returns (total Tensor, breakdown).

    t and eps override the Uniform[0,1] / Gaussian draws for gradient checks.
    The flow-decode term uses a fresh differentiable solve every call.
    """
    b = actions_flat.data.shape[0]
    if b == 0:
        raise ContractError("empty batch")

    if coupling == "minibatch_ot":
        with ad.no_grad():
            z0d = model.encode_vision(images, proprio)
            z1d, _, _ = model.encode_action(actions_flat, mode="mean")
        perm = ot_pair(z0d.data, z1d.data)
        actions_flat = Tensor(actions_flat.data[perm])
    elif coupling != "paired":
        raise ConfigError(f"unknown coupling {coupling!r}")

    needs_vision = weights.fm > 0 or weights.fd > 0
    z_0 = model.encode_vision(images, proprio) if needs_vision else None
    z_1, mu, logvar = model.encode_action(actions_flat, rng=rng, eps=eps)

    if t is None:
        t = rng.uniform(0.0, 1.0, size=b)
    total = Tensor(0.0)
    breakdown = {}

    l_fm = fm_loss(z_0, z_1, model.velocity, t) if weights.fm > 0 else Tensor(0.0)
    breakdown["fm"] = l_fm.item()
    if weights.fm > 0:
        total = ad.add(total, ad.mul(l_fm, weights.fm))

    if weights.fd > 0:
        z_hat = solve_ode(z_0, model.velocity, solver, differentiable=True)
        l_fd = flow_decode_loss(z_hat, actions_flat, z_1, model.decode_action,
                                weights.fd_variant)
        total = ad.add(total, ad.mul(l_fd, weights.fd))
    else:
        l_fd = Tensor(0.0)
    breakdown["fd"] = l_fd.item()

    if weights.ae > 0 and model.has_autoencoder:
        l_ae, l_recon = ae_loss(actions_flat, z_1, mu, logvar,
                                model.decode_action, weights.kl_weight)
        total = ad.add(total, ad.mul(l_ae, weights.ae))
    else:
        l_ae = l_recon = Tensor(0.0)
    breakdown["ae"] = l_ae.item()
    breakdown["recon"] = l_recon.item()
    breakdown["total"] = total.item()
    return total, breakdown


def ot_pair(z_0, z_1):
    """Permutation pi minimizing sum_i ||z_0[i] - z_1[pi[i]]||^2.

    Exact assignment up to batch 128, greedy above; batches over 512 are
    rejected.
    """
    z_0, z_1 = np.asarray(z_0), np.asarray(z_1)
    n, m = z_0.shape[0], z_1.shape[0]
    if n != m:
        raise ContractError(f"ot_pair batch sizes differ: {n} vs {m}")
    if n > 512:
        raise ContractError(f"ot_pair batch too large: {n} > 512")
    cost = ((z_0[:, None, :] - z_1[None, :, :]) ** 2).sum(axis=2)
    if n <= 128:
        rows, cols = linear_sum_assignment(cost)
        perm = np.empty(n, dtype=np.int64)
        perm[rows] = cols
        return perm
    perm = np.full(n, -1, dtype=np.int64)
    used = np.zeros(n, dtype=bool)
    for i in np.argsort(cost.min(axis=1)):
        j = np.argmin(np.where(used, np.inf, cost[i]))
        perm[i] = j
        used[j] = True
    # greedy can lose to the identity pairing; never return a worse coupling
    if cost[np.arange(n), perm].sum() > np.trace(cost):
        return np.arange(n, dtype=np.int64)
    return perm
