"""Deployable policy: vision encoder -> Euler flow in latent space -> action
decoder, with chunked execution and checkpoint persistence."""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ContractError, DimensionError
from .checkpoint import FormatError, load_tensors, save_tensors
from .flow import SolverConfig, solve_ode, ConfigError
from .nets import (ActionDecoder, ActionEncoder, MatrixUpsampler, VelocityNet,
                   VisionEncoder)

AE_MODES = ("variational", "deterministic", "matrix")
ACTIVATION_IDS = {"gelu": 0, "relu": 1, "tanh": 2}


@dataclass
class Normalizer:
    """Per-dimension affine action normalization (zero mean, unit std)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ConfigError("normalizer std must be positive in every dimension")

    @classmethod
    def fit(cls, actions):
        """actions: [N, D] raw action rows."""
        std = actions.std(axis=0)
        return cls(actions.mean(axis=0), np.where(std > 1e-8, std, 1.0))

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d))

    def normalize(self, a):
        return (a - self.mean) / self.std

    def denormalize(self, a):
        return a * self.std + self.mean


@dataclass
class ModelConfig:
    image_hw: tuple = (64, 64)
    channels: int = 3
    proprio_dim: int = 2
    d_latent: int = 64
    t_pred: int = 16
    d_action: int = 2
    hidden: int = 256
    n_hidden: int = 3
    vision_hidden: int = 256
    activation: str = "relu"
    ae_mode: str = "variational"
    matrix_seed: int = 0

    def __post_init__(self):
        if self.ae_mode not in AE_MODES:
            raise ConfigError(f"unknown ae_mode {self.ae_mode!r}")
        if self.activation not in ACTIVATION_IDS:
            raise ConfigError(f"unknown activation {self.activation!r}")


class VitaModel:
    """Trainable bundle: E_v, E_a / matrix map, D_a, and the velocity field."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.vision = VisionEncoder(cfg.image_hw, cfg.channels, cfg.d_latent, rng,
                                    proprio_dim=cfg.proprio_dim,
                                    hidden=cfg.vision_hidden,
                                    activation=cfg.activation)
        if cfg.ae_mode == "matrix":
            self.upsampler = MatrixUpsampler(cfg.t_pred, cfg.d_action,
                                             cfg.d_latent, seed=cfg.matrix_seed)
            self.action_enc = None
            self.decoder = None
        else:
            self.upsampler = None
            self.action_enc = ActionEncoder(
                cfg.t_pred, cfg.d_action, cfg.d_latent, rng,
                hidden=cfg.hidden, n_hidden=cfg.n_hidden,
                activation=cfg.activation,
                variational=(cfg.ae_mode == "variational"))
            self.decoder = ActionDecoder(cfg.t_pred, cfg.d_action, cfg.d_latent,
                                         rng, hidden=cfg.hidden,
                                         n_hidden=cfg.n_hidden,
                                         activation=cfg.activation)
        self.vnet = VelocityNet(cfg.d_latent, rng, hidden=cfg.hidden,
                                n_hidden=cfg.n_hidden, activation=cfg.activation)

    @property
    def has_autoencoder(self):
        return self.action_enc is not None

    @property
    def dtype(self):
        return self.vnet.mlp.layers[0].w.data.dtype

    def encode_vision(self, images, proprio=None):
        return self.vision(images, proprio)

    def encode_action(self, actions_flat, rng=None, eps=None, mode=None):
        if self.upsampler is not None:
            return self.upsampler.upsample(actions_flat), None, None
        return self.action_enc(actions_flat, rng=rng, eps=eps, mode=mode)

    def decode_action(self, z):
        if self.upsampler is not None:
            return self.upsampler.downsample(z)
        return self.decoder(z)

    def velocity(self, z, t):
        return self.vnet(z, t)

    def parameters(self):
        out = [(f"ev.{n}", t) for n, t in self.vision.parameters()]
        if self.action_enc is not None:
            out += [(f"ea.{n}", t) for n, t in self.action_enc.parameters()]
            out += [(f"da.{n}", t) for n, t in self.decoder.parameters()]
        out += [(f"v.{n}", t) for n, t in self.vnet.parameters()]
        return out

    def param_count(self):
        return sum(t.data.size for _, t in self.parameters())

    def cast(self, dtype):
        for _, t in self.parameters():
            t.data = t.data.astype(dtype)
        if self.upsampler is not None:
            self.upsampler.cast(dtype)
        return self

    def load_params(self, arrays):
        for name, t in self.parameters():
            if name not in arrays:
                raise FormatError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != t.data.shape:
                raise DimensionError(
                    f"parameter {name!r}: checkpoint shape {arrays[name].shape} "
                    f"!= model shape {t.data.shape}")
            t.data = arrays[name].astype(t.data.dtype)


_META_FMT = "<BBBB12I"


class VitaPolicy:
    """Noise-free policy: act() is deterministic end to end."""

    def __init__(self, model: VitaModel, normalizer: Normalizer,
                 solver: SolverConfig = None, t_exec: int = 8):
        self.model = model
        self.normalizer = normalizer
        self.solver = solver or SolverConfig()
        self.t_exec = t_exec
        if normalizer.mean.shape != (model.cfg.d_action,):
            raise ConfigError("normalizer width does not match action dimension")

    def _prep_obs(self, image, proprio):
        cfg = self.model.cfg
        dtype = self.model.dtype
        img = np.asarray(image)
        if img.shape != cfg.image_hw + (cfg.channels,):
            raise DimensionError(
                f"observation image shape {img.shape} != "
                f"{cfg.image_hw + (cfg.channels,)}")
        x = Tensor((img.astype(dtype) / 255.0 - 0.5)[None])
        p = None
        if cfg.proprio_dim:
            p = np.asarray(proprio, dtype=dtype).reshape(1, cfg.proprio_dim)
            p = Tensor(p)
        return x, p

    def act(self, image, proprio=None):
        """Observation -> [T_pred, D_action] action chunk."""
        with ad.no_grad():
            img, p = self._prep_obs(image, proprio)
            z_0 = self.model.encode_vision(img, p)
            z_hat = solve_ode(z_0, self.model.velocity, self.solver,
                              differentiable=False)
            flat = self.model.decode_action(z_hat).data[0]
        chunk = flat.reshape(self.model.cfg.t_pred, self.model.cfg.d_action)
        return self.normalizer.denormalize(chunk)

    # -- persistence -------------------------------------------------------

    def save(self, path):
        cfg = self.model.cfg
        meta = struct.pack(
            _META_FMT, 1, AE_MODES.index(cfg.ae_mode),
            ACTIVATION_IDS[cfg.activation], 0,
            cfg.d_latent, cfg.t_pred, self.t_exec, cfg.d_action,
            cfg.image_hw[0], cfg.image_hw[1], cfg.channels, cfg.proprio_dim,
            self.solver.num_steps, cfg.hidden, cfg.n_hidden, cfg.vision_hidden)
        meta += np.asarray(self.normalizer.mean, "<f4").tobytes()
        meta += np.asarray(self.normalizer.std, "<f4").tobytes()
        save_tensors(path, {n: t.data for n, t in self.model.parameters()},
                     meta=meta)

    @classmethod
    def load(cls, path, dtype=np.float64):
        arrays, meta = load_tensors(path, dtype=dtype)
        cfg, normalizer, t_exec, steps, _ = parse_policy_meta(meta)
        model = VitaModel(cfg, np.random.default_rng(0))
        model.cast(dtype)
        model.load_params(arrays)
        return cls(model, normalizer, SolverConfig(steps), t_exec=t_exec)


def checkpoint_kind(path):
    """1 = vita policy, 2 = conditional-FM baseline."""
    arrays, meta = load_tensors(path)
    if not meta:
        raise FormatError("checkpoint has no metadata block")
    return meta[0]


def parse_policy_meta(meta):
    """Returns (ModelConfig, Normalizer, t_exec, solver_steps, mechanism_id)."""
    head = struct.calcsize(_META_FMT)
    if len(meta) < head:
        raise FormatError("checkpoint metadata block truncated")
    (kind, ae_id, act_id, mech, d_latent, t_pred, t_exec, d_action, h, w, c,
     proprio, steps, hidden, n_hidden, vhidden) = struct.unpack(_META_FMT, meta[:head])
    if kind not in (1, 2):
        raise FormatError(f"unknown checkpoint kind {kind}")
    need = head + 2 * 4 * d_action
    if len(meta) < need:
        raise FormatError("checkpoint normalizer block truncated")
    mean = np.frombuffer(meta[head:head + 4 * d_action], "<f4").astype(np.float64)
    std = np.frombuffer(meta[head + 4 * d_action:need], "<f4").astype(np.float64)
    cfg = ModelConfig(image_hw=(h, w), channels=c, proprio_dim=proprio,
                      d_latent=d_latent, t_pred=t_pred, d_action=d_action,
                      hidden=hidden, n_hidden=n_hidden, vision_hidden=vhidden,
                      activation=list(ACTIVATION_IDS)[act_id],
                      ae_mode=AE_MODES[ae_id])
    return cfg, Normalizer(mean, std), t_exec, steps, mech


class ChunkExecutor:
    """Replans every t_exec steps; emits chunk entries in order."""

    def __init__(self, policy, t_exec=None):
        self.policy = policy
        self.t_exec = t_exec if t_exec is not None else getattr(policy, "t_exec", 8)
        t_pred = policy.model.cfg.t_pred if hasattr(policy, "model") else None
        if t_pred is not None and self.t_exec > t_pred:
            raise ConfigError(f"t_exec {self.t_exec} exceeds chunk size {t_pred}")
        self.chunk = None
        self.cursor = 0
        self.plan_calls = 0

    def reset(self):
        self.chunk = None
        self.cursor = 0

    def step(self, image, proprio=None):
        if self.chunk is None or self.cursor == self.t_exec:
            self.chunk = np.asarray(self.policy.act(image, proprio))
            self.cursor = 0
            self.plan_calls += 1
        action = self.chunk[self.cursor]
        self.cursor += 1
        return action
