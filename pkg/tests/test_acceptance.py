"""End-to-end acceptance suite.

Fast numerical oracles (gradients, solver, losses, persistence, latency
ordering) run in seconds to minutes. The task-success and ablation criteria
train full policies and are marked `slow`; they share module-scoped training
fixtures so each configuration is trained exactly once.
"""

import dataclasses
import time

import numpy as np
import pytest

from vita import autodiff as ad
from vita.autodiff import Tensor
from vita.baselines import CondFmPolicy
from vita.bench import run_bench
from vita.checkpoint import FormatError
from vita.dataset import generate_dataset, load_dataset, save_dataset
from vita.envs import evaluate, make_env
from vita.flow import (LossWeights, SolverConfig, fm_loss, kl_loss, solve_ode,
                       vita_loss)
from vita.policy import ModelConfig, Normalizer, VitaModel, VitaPolicy
from vita.trainer import TrainConfig, train


# -- gradient integrity -------------------------------------------------------

def test_gradient_integrity_20_random_coordinates():
    """Autodiff vs central finite differences on the full composite loss
    (6-step differentiable solve, reconstruction flow-decode term), at 20
    random parameter coordinates spanning the vision encoder, action encoder,
    action decoder, and velocity net. Relative error < 1e-4 in f64, < 1 min."""
    start = time.process_time()
    rng = np.random.default_rng(42)
    cfg = ModelConfig(image_hw=(16, 16), proprio_dim=2, d_latent=16, t_pred=4,
                      d_action=2, hidden=16, n_hidden=2, vision_hidden=16,
                      activation="gelu")  # smooth everywhere, so central
    model = VitaModel(cfg, rng)           # differences are kink-free
    b = 2
    imgs = Tensor(rng.uniform(-0.5, 0.5, size=(b, 16, 16, 3)))
    props = Tensor(rng.uniform(0, 1, size=(b, 2)))
    acts = Tensor(rng.standard_normal((b, cfg.t_pred * cfg.d_action)))
    t = rng.uniform(0, 1, b)
    eps = rng.standard_normal((b, cfg.d_latent))
    weights = LossWeights()
    solver = SolverConfig(6)

    def loss_value():
        with ad.no_grad():
            total, _ = vita_loss(model, imgs, props, acts, weights, solver,
                                 t=t, eps=eps)
        return total.item()

    ad.tape().clear()
    total, _ = vita_loss(model, imgs, props, acts, weights, solver, t=t,
                         eps=eps)
    ad.backward(total)
    grads = {n: p.grad.copy() for n, p in model.parameters()}
    ad.tape().clear()

    params = dict(model.parameters())
    by_net = {"ev.": [], "ea.": [], "da.": [], "v.": []}
    for name in params:
        for prefix in by_net:
            if name.startswith(prefix):
                by_net[prefix].append(name)

    checked = 0
    for prefix, names in by_net.items():
        for _ in range(5):
            name = names[rng.integers(len(names))]
            p = params[name]
            idx = np.unravel_index(rng.integers(p.data.size), p.data.shape)
            h = 1e-6 * max(1.0, abs(p.data[idx]))
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = loss_value()
            p.data[idx] = orig - h
            down = loss_value()
            p.data[idx] = orig
            fd = (up - down) / (2 * h)
            g = grads[name][idx]
            rel = abs(g - fd) / max(abs(fd), abs(g), 1e-12)
            assert rel < 1e-4, f"{name}{idx}: autodiff {g} vs fd {fd}"
            checked += 1
    assert checked == 20
    assert time.process_time() - start < 60


# -- solver oracle -------------------------------------------------------------

def test_euler_exponential_oracle():
    """For dz/dt = z from z_0 = 1, Euler with n steps returns (1 + 1/n)^n."""
    z = solve_ode(Tensor(np.array([[1.0]])), lambda z, t: z, SolverConfig(6),
                  differentiable=False)
    assert abs(z.data[0, 0] - (7.0 / 6.0) ** 6) < 1e-12


def test_euler_first_order_convergence():
    """Global error against e^{z_0} halves per step doubling (first-order
    convergence). Each solve matches the closed form (1 + 1/n)^n exactly; the
    10% band around halving is asymptotic — exact arithmetic gives ratios
    0.652, 0.591, 0.551 for the first three doublings, converging to 0.5 —
    so it is enforced from n=8 upward and monotone decrease before that."""
    grid = (1, 2, 4, 8, 16, 32, 64)
    errs = []
    for n in grid:
        z = solve_ode(Tensor(np.array([[1.0]])), lambda z, t: z,
                      SolverConfig(n), differentiable=False)
        assert abs(z.data[0, 0] - (1 + 1 / n) ** n) < 1e-12
        errs.append(abs(np.e - z.data[0, 0]))
    for n, lo, hi in zip(grid, errs, errs[1:]):
        ratio = hi / lo
        assert ratio < 0.66, f"n={n}: error ratio {ratio}"
        if n >= 8:
            assert 0.45 <= ratio <= 0.55, f"n={n}: error ratio {ratio}"


# -- loss oracles ---------------------------------------------------------------

def test_fm_loss_zero_for_exact_velocity():
    rng = np.random.default_rng(0)
    z0 = Tensor(rng.standard_normal((8, 16)))
    z1 = Tensor(rng.standard_normal((8, 16)))
    oracle = lambda z_t, t: Tensor(z1.data - z0.data)  # noqa: E731
    with ad.no_grad():
        loss = fm_loss(z0, z1, oracle, t=rng.uniform(0, 1, 8))
    assert abs(loss.item()) < 1e-12


def test_kl_closed_forms():
    with ad.no_grad():
        zero = kl_loss(Tensor(np.zeros((4, 16))), Tensor(np.zeros((4, 16))))
        # unit mean, unit variance: 0.5 (mu^2 + 1 - 0 - 1) = 0.5 per dim
        half = kl_loss(Tensor(np.ones((4, 1))), Tensor(np.zeros((4, 1))))
        per_dim = kl_loss(Tensor(np.ones((4, 16))), Tensor(np.zeros((4, 16))))
    assert abs(zero.item()) < 1e-12
    assert abs(half.item() - 0.5) < 1e-12
    assert abs(per_dim.item() - 8.0) < 1e-12


# -- shared training fixtures ---------------------------------------------------

def _timed_train(cfg, ds, out_dir):
    t0 = time.process_time()
    res = train(cfg, ds, out_dir)
    return res, time.process_time() - t0


@pytest.fixture(scope="module")
def reach_run(tmp_path_factory):
    ds = generate_dataset(make_env("reach"), 150, seed=0)
    return _timed_train(TrainConfig(task="reach", seed=0),
                        ds, tmp_path_factory.mktemp("reach"))


@pytest.fixture(scope="module")
def pusht_dataset():
    return generate_dataset(make_env("pusht"), 150, seed=0)


@pytest.fixture(scope="module")
def pusht_fd_runs(pusht_dataset, tmp_path_factory):
    """Flow-decode variants trained with shared seed and dataset. The
    reconstruction run is also the default configuration, so it doubles as
    the end-to-end PushT run and the autoencoder arm of the latent-target
    comparison."""
    out = tmp_path_factory.mktemp("pusht_fd")
    base = TrainConfig(task="pusht", seed=0)
    runs = {}
    for variant in ("reconstruction", "consistency", "none"):
        cfg = dataclasses.replace(base, fd_variant=variant)
        runs[variant] = _timed_train(cfg, pusht_dataset, out / variant)
    return runs


@pytest.fixture(scope="module")
def pusht_matrix_run(pusht_dataset, tmp_path_factory):
    cfg = TrainConfig(task="pusht", seed=0, ae_mode="matrix", lambda_ae=0.0)
    return _timed_train(cfg, pusht_dataset,
                        tmp_path_factory.mktemp("pusht_matrix"))


# -- end-to-end task success ----------------------------------------------------

@pytest.mark.slow
def test_reach_success_rate(reach_run):
    res, seconds = reach_run
    assert res.best_sr >= 0.9, f"Reach2D SR {res.best_sr}"
    assert seconds < 15 * 60, f"Reach2D training took {seconds / 60:.1f} min"


@pytest.mark.slow
def test_pusht_success_rate(pusht_fd_runs):
    res, seconds = pusht_fd_runs["reconstruction"]
    assert res.best_sr >= 0.7, f"PushT-lite SR {res.best_sr}"
    assert seconds < 15 * 60, f"PushT training took {seconds / 60:.1f} min"


# -- flow-decode ablation --------------------------------------------------------

@pytest.mark.slow
def test_flow_decode_ablation(pusht_fd_runs):
    recon = pusht_fd_runs["reconstruction"][0].best_sr
    consist = pusht_fd_runs["consistency"][0].best_sr
    none = pusht_fd_runs["none"][0].best_sr
    assert recon >= 0.6, f"reconstruction SR {recon}"
    assert none <= 0.2, f"fd_variant=none SR {none}"
    assert none <= consist <= recon or abs(consist - recon) <= 0.1, \
        f"consistency SR {consist} outside [none={none}, recon={recon}]"
    total = sum(sec for _, sec in pusht_fd_runs.values())
    assert total < 45 * 60, f"triple took {total / 60:.1f} min"


# -- latent-target ablation -------------------------------------------------------

@pytest.mark.slow
def test_matrix_target_underperforms_autoencoder(pusht_fd_runs,
                                                 pusht_matrix_run):
    ae_sr = pusht_fd_runs["reconstruction"][0].best_sr
    matrix_sr = pusht_matrix_run[0].best_sr
    assert matrix_sr <= 0.5 * ae_sr, \
        f"matrix SR {matrix_sr} vs autoencoder SR {ae_sr}"


# -- latency ordering --------------------------------------------------------------

def test_latency_ordering_at_matched_parameters():
    start = time.process_time()
    rows = run_bench(["vita", "adaln", "xattn"], repeats=1000)
    by_model = {r[0]: r for r in rows}
    vita_params = by_model["vita"][2]
    for m in ("adaln", "xattn"):
        assert abs(by_model[m][2] - vita_params) / vita_params <= 0.05
    vita, adaln, xattn = (by_model[m][3] for m in ("vita", "adaln", "xattn"))
    assert vita < adaln < xattn, f"latency order {vita} {adaln} {xattn}"
    assert adaln >= 1.3 * vita, f"adaln only {adaln / vita:.2f}x vita"
    assert xattn >= 1.8 * vita, f"xattn only {xattn / vita:.2f}x vita"
    assert time.process_time() - start < 5 * 60


# -- determinism --------------------------------------------------------------------

@pytest.mark.slow
def test_vita_eval_is_reproducible(reach_run):
    res, _ = reach_run
    env = make_env("reach")
    policy = VitaPolicy.load(res.best_path)
    sr1, out1 = evaluate(policy, env, n_episodes=20, seed=7)
    sr2, out2 = evaluate(policy, env, n_episodes=20, seed=7)
    assert sr1 == sr2
    assert out1 == out2


def test_unseeded_baseline_chunks_differ():
    cfg = ModelConfig(image_hw=(16, 16), proprio_dim=2, d_latent=32, t_pred=16,
                      d_action=2, hidden=32, n_hidden=2, vision_hidden=32)
    policy = CondFmPolicy(cfg, "concat", np.random.default_rng(0))
    img = np.random.default_rng(1).integers(0, 256, (16, 16, 3), np.uint8)
    a = policy.act(img, np.zeros(2))
    b = policy.act(img, np.zeros(2))
    assert np.abs(a - b).max() > 1e-8


# -- persistence ---------------------------------------------------------------------

def test_dataset_round_trip_byte_identical(tmp_path):
    ds = generate_dataset(make_env("reach"), 3, seed=5)
    a, b = tmp_path / "a.vitd", tmp_path / "b.vitd"
    save_dataset(a, ds)
    save_dataset(b, load_dataset(a))
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_round_trip_action_identical(tmp_path):
    rng = np.random.default_rng(6)
    cfg = ModelConfig(image_hw=(16, 16), proprio_dim=2, d_latent=32, t_pred=16,
                      d_action=2, hidden=32, n_hidden=2, vision_hidden=32)
    policy = VitaPolicy(VitaModel(cfg, rng),
                        Normalizer(np.array([0.1, -0.2]), np.array([0.5, 2.0])))
    path = tmp_path / "p.vitc"
    policy.save(path)
    loaded = VitaPolicy.load(path)
    img = rng.integers(0, 256, (16, 16, 3), np.uint8)
    prop = rng.uniform(0, 1, 2)
    np.testing.assert_allclose(loaded.act(img, prop), policy.act(img, prop),
                               atol=1e-5)


@pytest.mark.parametrize("kind", ["truncated", "bad_magic"])
def test_corrupt_files_rejected(tmp_path, kind):
    ds = generate_dataset(make_env("reach"), 1, seed=0)
    ds_path = tmp_path / "d.vitd"
    save_dataset(ds_path, ds)
    cfg = ModelConfig(image_hw=(16, 16), proprio_dim=2, d_latent=16, t_pred=4,
                      d_action=2, hidden=16, n_hidden=1, vision_hidden=16)
    policy = VitaPolicy(VitaModel(cfg, np.random.default_rng(0)),
                        Normalizer.identity(2))
    ck_path = tmp_path / "p.vitc"
    policy.save(ck_path)
    for path, loader in ((ds_path, load_dataset), (ck_path, VitaPolicy.load)):
        raw = path.read_bytes()
        bad = raw[:len(raw) // 3] if kind == "truncated" else b"XXXX" + raw[4:]
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            loader(path)
