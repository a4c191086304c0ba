"""Latency/throughput benchmark: batch-1 act() timing on the float32 no-tape
fast path, at parameter counts matched across models."""

import csv
import time

import numpy as np

from .baselines import MECHANISMS, CondFmPolicy, match_params
from .flow import ConfigError, SolverConfig
from .policy import ModelConfig, Normalizer, VitaModel, VitaPolicy

BENCH_MODELS = ("vita",) + MECHANISMS
WARMUP_CALLS = 100


def build_bench_policy(model, d_latent=64, chunk=16, solver_steps=6, seed=0):
    """Policy with fresh (untrained) weights; baselines are width-matched to
    the VITA parameter count."""
    if model not in BENCH_MODELS:
        raise ConfigError(f"unknown bench model {model!r} "
                          f"(choose from {BENCH_MODELS})")
    cfg = ModelConfig(d_latent=d_latent, t_pred=chunk, proprio_dim=2)
    norm = Normalizer.identity(cfg.d_action)
    if model == "vita":
        vm = VitaModel(cfg, np.random.default_rng(seed))
        return VitaPolicy(vm, norm, SolverConfig(solver_steps))
    target = VitaModel(cfg, np.random.default_rng(seed)).param_count()

    def build(width):
        return CondFmPolicy(cfg, model, np.random.default_rng(seed),
                            hidden=width)

    hidden = match_params(target, build)
    return CondFmPolicy(cfg, model, np.random.default_rng(seed),
                        normalizer=norm, solver=SolverConfig(solver_steps),
                        hidden=hidden)


def time_policy(policy, repeats=1000, warmup=WARMUP_CALLS, seed=0):
    """Median act() latency in ms over `repeats` calls on one fixed synthetic
    observation."""
    rng = np.random.default_rng(seed)
    cfg = policy.cfg if hasattr(policy, "cfg") else policy.model.cfg
    image = rng.integers(0, 256, size=cfg.image_hw + (cfg.channels,),
                         dtype=np.uint8)
    proprio = rng.uniform(0, 1, size=cfg.proprio_dim).astype(np.float32)
    if hasattr(policy, "seed"):
        policy.seed(seed)
    for _ in range(warmup):
        policy.act(image, proprio)
    samples = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        policy.act(image, proprio)
        samples[i] = time.perf_counter() - t0
    return float(np.median(samples) * 1000.0)


def run_bench(models=BENCH_MODELS, d_latent=64, chunk=16, repeats=1000,
              solver_steps=6, seed=0):
    """Returns rows sorted by latency:
    (model, mechanism, params, latency_ms, throughput, batch)."""
    rows = []
    for model in models:
        policy = build_bench_policy(model, d_latent, chunk, solver_steps, seed)
        net = policy.model if hasattr(policy, "model") else policy
        net.cast(np.float32)
        latency = time_policy(policy, repeats=repeats, seed=seed)
        mechanism = getattr(policy, "mechanism", "none")
        rows.append((model, mechanism, net.param_count(), latency,
                     1000.0 / latency, 1))
    return sorted(rows, key=lambda r: r[3])


BENCH_HEADER = ["model", "mechanism", "params", "latency_ms",
                "throughput_chunks_per_s", "batch"]


def write_bench_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BENCH_HEADER)
        for model, mech, params, lat, thr, batch in rows:
            w.writerow([model, mech, params, f"{lat:.4f}", f"{thr:.2f}", batch])
