"""Command-line entry point: gen / train / eval / ablate / bench.

Exit codes: 0 success, 1 runtime or format error, 2 usage error.
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import reporting
from .autodiff import ContractError, DimensionError
from .baselines import CondFmPolicy
from .bench import BENCH_MODELS, run_bench, write_bench_csv
from .checkpoint import FormatError, VersionError
from .dataset import GenerationError, generate_dataset, load_dataset, \
    save_dataset
from .envs import ENVS, evaluate, make_env
from .flow import ConfigError
from .policy import VitaPolicy, checkpoint_kind
from .trainer import ABLATION_SUITES, TrainConfig, run_ablation, train

_ERRORS = (ConfigError, ContractError, DimensionError, FormatError,
           VersionError, GenerationError, OSError, KeyError)


def _env_seed(seed):
    """VITA_SEED overrides any configured or flagged seed."""
    raw = os.environ.get("VITA_SEED")
    if raw is None:
        return seed
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"VITA_SEED must be an integer, got {raw!r}")


def cmd_gen(args):
    env = make_env(args.task)
    ds = generate_dataset(env, args.episodes, _env_seed(args.seed))
    save_dataset(args.out, ds)
    steps = sum(len(ep.actions) for ep in ds.episodes)
    print(f"wrote {args.out}: {len(ds.episodes)} episodes, {steps} steps, "
          f"task={args.task}")
    return 0


def _load_train_config(args):
    cfg = TrainConfig.from_sources(args.config, args.overrides)
    cfg.seed = _env_seed(cfg.seed)
    return cfg


def cmd_train(args):
    cfg = _load_train_config(args)
    ds = load_dataset(args.data)
    res = train(cfg, ds, args.out)
    reporting.render_training_curves(res.metrics_path)
    status = "diverged (NaN loss); kept last finite weights" if res.diverged \
        else "done"
    print(f"{status}: {res.steps_run} steps, best SR {res.best_sr:.2f}, "
          f"{res.ms_per_step:.0f} ms/step")
    print(f"checkpoints: {res.best_path} (best), {res.last_path} (last)")
    print(f"metrics: {res.metrics_path}")
    return 1 if res.diverged else 0


def load_policy(path, dtype=np.float64):
    if checkpoint_kind(path) == 2:
        return CondFmPolicy.load(path, dtype=dtype)
    return VitaPolicy.load(path, dtype=dtype)


def cmd_eval(args):
    policy = load_policy(args.ckpt)
    seed = _env_seed(args.seed)
    if hasattr(policy, "seed"):
        policy.seed(seed)
    env = make_env(args.task)
    sr, results = evaluate(policy, env, n_episodes=args.episodes, seed=seed)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "episode", "success", "length"])
        for ep_seed, ep, success, length in results:
            w.writerow([ep_seed, ep, int(success), length])
    reporting.render_eval(args.out)
    print(f"success rate {sr:.3f} over {args.episodes} episodes "
          f"({args.task}, seed {seed})")
    return 0


def cmd_ablate(args):
    cfg = _load_train_config(args)
    ds = load_dataset(args.data)
    results, csv_path = run_ablation(args.suite, cfg, ds, args.out)
    reporting.render_ablation(csv_path)
    for variant, res in results:
        reporting.render_training_curves(res.metrics_path)
        print(f"{variant}: best SR {res.best_sr:.2f}")
    print(f"comparison: {csv_path}")
    return 0


def cmd_bench(args):
    models = args.models.split(",") if args.models else list(BENCH_MODELS)
    unknown = [m for m in models if m not in BENCH_MODELS]
    if unknown:
        print(f"usage error: unknown bench model(s) {unknown}; choose from "
              f"{', '.join(BENCH_MODELS)}", file=sys.stderr)
        return 2
    rows = run_bench(models, d_latent=args.dlatent, chunk=args.chunk,
                     repeats=args.repeats, seed=_env_seed(args.seed))
    write_bench_csv(args.out, rows)
    reporting.render_bench(args.out)
    print(f"{'model':<8} {'mechanism':<10} {'params':>9} {'ms/chunk':>9} "
          f"{'chunks/s':>9}")
    for model, mech, params, lat, thr, _ in rows:
        print(f"{model:<8} {mech:<10} {params:>9} {lat:>9.3f} {thr:>9.1f}")
    print(f"(median of {args.repeats} calls after 100 warm-ups, batch 1, "
          f"float32)")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="vita",
        description="Noise-free vision-to-action flow matching policies")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate an expert demonstration dataset")
    g.add_argument("--task", choices=sorted(ENVS), required=True)
    g.add_argument("--episodes", type=int, default=150)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a policy on a dataset")
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--data", required=True, help="dataset path (.vitd)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("overrides", nargs="*", metavar="key=value",
                   help="config overrides (later wins)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", choices=sorted(ENVS), required=True)
    e.add_argument("--episodes", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="per-episode CSV path")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation suite")
    a.add_argument("--suite", choices=sorted(ABLATION_SUITES), required=True)
    a.add_argument("--config", default=None)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("overrides", nargs="*", metavar="key=value")
    a.set_defaults(fn=cmd_ablate)

    b = sub.add_parser("bench", help="latency/throughput benchmark")
    b.add_argument("--models", default=None,
                   help=f"comma list from {','.join(BENCH_MODELS)}")
    b.add_argument("--dlatent", type=int, default=64)
    b.add_argument("--chunk", type=int, default=16)
    b.add_argument("--repeats", type=int, default=1000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True, help="report CSV path")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
