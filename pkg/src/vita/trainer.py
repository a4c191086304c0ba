"""Training loop: deterministic batches, periodic rollout evaluation,
best-checkpoint tracking, and a metrics CSV, plus an ablation runner."""

import csv
import dataclasses
import os
import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Tensor
from .baselines import CondFmPolicy, MECHANISMS, cond_fm_loss, match_params
from .envs import evaluate, make_env
from .flow import ConfigError, LossWeights, SolverConfig, vita_loss
from .optim import Adam
from .policy import ModelConfig, Normalizer, VitaModel, VitaPolicy

METRICS_HEADER = ["step", "total", "fm", "fd", "ae", "grad_norm", "eval_sr",
                  "ms_per_step"]


@dataclass
class TrainConfig:
    task: str = "reach"
    policy: str = "vita"          # vita | cond_fm:{concat,film,adaln,xattn}
    steps: int = 5000
    batch_size: int = 128
    lr: float = 2e-3
    lr_schedule: str = "cosine"   # cosine (decay to 10% of lr) | constant
    clip_norm: float = 10.0
    seed: int = 0
    d_latent: int = 64
    hidden: int = 192
    n_hidden: int = 3
    vision_hidden: int = 256
    activation: str = "relu"
    t_pred: int = 16
    t_exec: int = 8
    solver_steps: int = 6
    lambda_fm: float = 1.0
    lambda_fd: float = 1.0
    lambda_ae: float = 1.0
    fd_variant: str = "reconstruction"
    kl_weight: float = 1e-4
    ae_mode: str = "variational"
    coupling: str = "paired"
    augment_shift: int = 4        # max |pixels| of random image translation
    eval_interval: int = 500
    eval_episodes: int = 50
    episodes: int = 100
    match_to: int = 0             # target parameter count for baselines (0 = off)
    paper_scale: bool = False

    def __post_init__(self):
        if self.policy != "vita":
            if not (self.policy.startswith("cond_fm:")
                    and self.policy.split(":", 1)[1] in MECHANISMS):
                raise ConfigError(f"unknown policy {self.policy!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.fd_variant == "none":
            self.lambda_fd = 0.0
        if self.paper_scale:
            self.steps = 50000
            self.d_latent = 512

    @classmethod
    def from_sources(cls, path=None, overrides=()):
        """Flat key=value config file, then CLI overrides; later wins."""
        pairs = []
        if path:
            with open(path) as f:
                for line in f:
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(f"bad config line {line!r}")
                    pairs.append(line)
        pairs += list(overrides)
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, raw = (s.strip() for s in pair.split("=", 1))
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, fields[key].type, key)
        return cls(**kwargs)


def _coerce(raw, typ, key):
    if typ in (bool, "bool"):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"bad boolean for {key!r}: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


@dataclass
class TrainResult:
    best_sr: float
    final_sr: float
    best_path: str
    last_path: str
    metrics_path: str
    steps_run: int
    diverged: bool
    param_count: int
    ms_per_step: float


def _model_config(cfg: TrainConfig, ds):
    return ModelConfig(image_hw=ds.image_shape[:2], channels=ds.image_shape[2],
                       proprio_dim=ds.proprio_dim, d_latent=cfg.d_latent,
                       t_pred=cfg.t_pred, d_action=ds.d_action,
                       hidden=cfg.hidden, n_hidden=cfg.n_hidden,
                       vision_hidden=cfg.vision_hidden,
                       activation=cfg.activation, ae_mode=cfg.ae_mode)


def lr_at(cfg: TrainConfig, step):
    """Learning rate for 1-based training step under cfg.lr_schedule."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    frac = (step - 1) / max(cfg.steps - 1, 1)
    return cfg.lr * (0.1 + 0.45 * (1.0 + np.cos(np.pi * frac)))


def build_policy(cfg: TrainConfig, ds, normalizer, rng):
    mcfg = _model_config(cfg, ds)
    solver = SolverConfig(cfg.solver_steps)
    if cfg.policy == "vita":
        model = VitaModel(mcfg, rng)
        return VitaPolicy(model, normalizer, solver, t_exec=cfg.t_exec)
    mech = cfg.policy.split(":", 1)[1]
    hidden = cfg.hidden
    if cfg.match_to > 0:
        state = rng.bit_generator.state

        def build(width):
            r = np.random.default_rng(0)
            return CondFmPolicy(mcfg, mech, r, hidden=width)

        hidden = match_params(cfg.match_to, build)
        rng.bit_generator.state = state
    return CondFmPolicy(mcfg, mech, rng, normalizer=normalizer, solver=solver,
                        t_exec=cfg.t_exec, hidden=hidden)


def train(cfg: TrainConfig, ds, out_dir):
    """Train a policy on the dataset; writes checkpoints and metrics.csv under
    out_dir and returns a TrainResult."""
    _kernels.tune_allocator()
    os.makedirs(out_dir, exist_ok=True)
    images_u8, proprio_all, chunks = ds.chunks(cfg.t_pred)
    n = images_u8.shape[0]
    normalizer = Normalizer.fit(ds.all_actions())
    flat = normalizer.normalize(chunks).reshape(n, -1).astype(np.float64)

    seq = np.random.SeedSequence(cfg.seed)
    init_rng, batch_rng, t_rng, eps_rng, aug_rng = (np.random.default_rng(s)
                                                    for s in seq.spawn(5))
    policy = build_policy(cfg, ds, normalizer, init_rng)
    is_vita = cfg.policy == "vita"
    model = policy.model if is_vita else policy
    weights = LossWeights(cfg.lambda_fm, cfg.lambda_fd, cfg.lambda_ae,
                          cfg.fd_variant, cfg.kl_weight)
    solver = SolverConfig(cfg.solver_steps)
    opt = Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    env = make_env(cfg.task)

    best_path = os.path.join(out_dir, "best.vitc")
    last_path = os.path.join(out_dir, "last.vitc")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    rows = []
    best_sr, final_sr = -1.0, 0.0
    diverged = False
    ms_total = 0.0
    steps_run = 0

    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        ad.tape().clear()
        idx = batch_rng.integers(0, n, size=cfg.batch_size)
        img_u8 = images_u8[idx]
        prop_batch = proprio_all[idx].astype(np.float64)
        if cfg.augment_shift > 0:
            img_u8 = img_u8.copy()
            _shift_batch(img_u8, prop_batch, cfg.augment_shift, aug_rng)
        img_batch = img_u8.astype(np.float64)
        img_batch *= 1.0 / 255.0
        img_batch -= 0.5
        imgs = Tensor(img_batch)
        props = Tensor(prop_batch)
        acts = Tensor(flat[idx])
        t = t_rng.uniform(0.0, 1.0, size=cfg.batch_size)

        if is_vita:
            total, bd = vita_loss(model, imgs, props, acts, weights, solver,
                                  rng=eps_rng, t=t, coupling=cfg.coupling)
        else:
            total = cond_fm_loss(policy, imgs, props, acts, eps_rng, t=t)
            bd = {"fm": total.item(), "fd": 0.0, "ae": 0.0,
                  "total": total.item()}
        if not np.isfinite(total.item()):
            # abort before the update so the saved weights stay finite
            diverged = True
            break
        opt.zero_grad()
        ad.backward(total)
        opt.lr = lr_at(cfg, step)
        gnorm = opt.step()
        ms = (time.perf_counter() - t0) * 1000.0
        ms_total += ms
        steps_run = step

        eval_sr = ""
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            eval_sr = _evaluate(policy, env, cfg)
            final_sr = eval_sr
            if eval_sr >= best_sr:
                best_sr = eval_sr
                policy.save(best_path)
        rows.append([step, bd["total"], bd["fm"], bd["fd"], bd["ae"],
                     gnorm, eval_sr, ms])

    policy.save(last_path)
    if best_sr < 0:  # never evaluated (tiny runs): fall back to the last state
        best_sr = 0.0
        policy.save(best_path)
    _write_metrics(metrics_path, rows)
    return TrainResult(best_sr=best_sr, final_sr=final_sr, best_path=best_path,
                       last_path=last_path, metrics_path=metrics_path,
                       steps_run=steps_run, diverged=diverged,
                       param_count=model.param_count(),
                       ms_per_step=ms_total / max(steps_run, 1))


def _shift_batch(images_u8, proprio, max_shift, rng):
    """Random per-sample image translation (zero fill) with the proprio
    position shifted to match; the scene geometry is translation-invariant so
    action labels stay valid."""
    b, h, w, _ = images_u8.shape
    shifts = rng.integers(-max_shift, max_shift + 1, size=(b, 2))
    for i, (dc, dr) in enumerate(shifts):
        if dc or dr:
            src = images_u8[i].copy()
            images_u8[i] = 0
            rows = slice(max(dr, 0), h + min(dr, 0))
            cols = slice(max(dc, 0), w + min(dc, 0))
            src_rows = slice(max(-dr, 0), h + min(-dr, 0))
            src_cols = slice(max(-dc, 0), w + min(-dc, 0))
            images_u8[i][rows, cols] = src[src_rows, src_cols]
        if proprio.shape[1] >= 2:
            proprio[i, 0] += dc / w
            proprio[i, 1] += dr / h


def _evaluate(policy, env, cfg):
    if hasattr(policy, "seed"):
        policy.seed(77_000 + cfg.seed)
    sr, _ = evaluate(policy, env, n_episodes=cfg.eval_episodes,
                     seed=100_000 + cfg.seed)
    return sr


def _write_metrics(path, rows):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        w.writerows(rows)
    os.replace(tmp, path)


# -- ablations ----------------------------------------------------------------

ABLATION_SUITES = {
    "fd_variant": [("reconstruction", {"fd_variant": "reconstruction"}),
                   ("consistency", {"fd_variant": "consistency"}),
                   ("none", {"fd_variant": "none", "lambda_fd": 0.0})],
    "latent_target": [("autoencoder", {"ae_mode": "variational"}),
                      ("matrix", {"ae_mode": "matrix", "lambda_ae": 0.0})],
    "coupling": [("paired", {"coupling": "paired"}),
                 ("minibatch_ot", {"coupling": "minibatch_ot"})],
}


def run_ablation(suite, base_cfg: TrainConfig, ds, out_dir):
    """Train every variant of the suite from the same seed and dataset; write
    a comparison CSV and return [(variant, TrainResult)]."""
    if suite not in ABLATION_SUITES:
        raise ConfigError(
            f"unknown ablation suite {suite!r} (choose from {sorted(ABLATION_SUITES)})")
    os.makedirs(out_dir, exist_ok=True)
    results = []
    for variant, changes in ABLATION_SUITES[suite]:
        cfg = dataclasses.replace(base_cfg, **changes)
        res = train(cfg, ds, os.path.join(out_dir, variant))
        results.append((variant, res))
    path = os.path.join(out_dir, f"ablation_{suite}.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "best_sr", "final_sr", "steps", "param_count",
                    "ms_per_step", "diverged"])
        for variant, res in results:
            w.writerow([variant, res.best_sr, res.final_sr, res.steps_run,
                        res.param_count, f"{res.ms_per_step:.3f}",
                        int(res.diverged)])
    return results, path
