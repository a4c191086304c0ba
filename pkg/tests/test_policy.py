import numpy as np
import pytest

from vita.checkpoint import FormatError, VersionError, save_tensors
from vita.flow import ConfigError, SolverConfig
from vita.policy import (ChunkExecutor, ModelConfig, Normalizer, VitaModel,
                         VitaPolicy, checkpoint_kind, parse_policy_meta)


def small_cfg(**kw):
    base = dict(image_hw=(16, 16), proprio_dim=2, d_latent=32, t_pred=16,
                d_action=2, hidden=32, n_hidden=2, vision_hidden=32)
    base.update(kw)
    return ModelConfig(**base)


def make_policy(seed=0, **kw):
    cfg = small_cfg(**kw)
    model = VitaModel(cfg, np.random.default_rng(seed))
    norm = Normalizer(np.array([0.1, -0.2]), np.array([0.5, 2.0]))
    return VitaPolicy(model, norm, SolverConfig(6), t_exec=8)


def obs(seed=3, hw=(16, 16)):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=hw + (3,), dtype=np.uint8)
    return img, rng.uniform(0, 1, 2).astype(np.float32)


class TestNormalizer:
    def test_round_trip_exact(self):
        n = Normalizer(np.array([1.0, -3.0]), np.array([0.2, 5.0]))
        a = np.random.default_rng(0).normal(size=(40, 2))
        np.testing.assert_allclose(n.denormalize(n.normalize(a)), a,
                                   atol=1e-10)

    def test_fit_statistics(self):
        a = np.random.default_rng(1).normal(2.0, 3.0, size=(5000, 2))
        n = Normalizer.fit(a)
        z = n.normalize(a)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)

    def test_zero_std_rejected(self):
        with pytest.raises(ConfigError):
            Normalizer(np.zeros(2), np.array([1.0, 0.0]))


class TestAct:
    def test_chunk_shape(self):
        policy = make_policy()
        img, p = obs()
        assert policy.act(img, p).shape == (16, 2)

    def test_deterministic(self):
        policy = make_policy()
        img, p = obs()
        np.testing.assert_array_equal(policy.act(img, p), policy.act(img, p))

    def test_act_leaves_no_tape(self):
        from vita import autodiff as ad
        ad.tape().clear()
        policy = make_policy()
        img, p = obs()
        policy.act(img, p)
        assert len(ad.tape()) == 0

    def test_normalizer_applied(self):
        policy = make_policy()
        img, p = obs()
        chunk = policy.act(img, p)
        raw = (chunk - policy.normalizer.mean) / policy.normalizer.std
        np.testing.assert_allclose(
            policy.normalizer.denormalize(raw), chunk, atol=1e-12)

    def test_matrix_mode_act(self):
        policy = make_policy(ae_mode="matrix")
        img, p = obs()
        assert policy.act(img, p).shape == (16, 2)


class TestChunkExecutor:
    def test_replan_count(self):
        policy = make_policy()
        ex = ChunkExecutor(policy, t_exec=8)
        img, p = obs()
        for _ in range(16):
            ex.step(img, p)
        assert ex.plan_calls == 2

    def test_emits_chunk_prefix_in_order(self):
        policy = make_policy()
        ex = ChunkExecutor(policy, t_exec=8)
        img, p = obs()
        chunk = policy.act(img, p)
        got = [ex.step(img, p) for _ in range(8)]
        np.testing.assert_allclose(np.stack(got), chunk[:8], atol=1e-12)

    def test_t_exec_beyond_chunk_rejected(self):
        with pytest.raises(ConfigError):
            ChunkExecutor(make_policy(), t_exec=17)

    def test_reset_forces_replan(self):
        policy = make_policy()
        ex = ChunkExecutor(policy, t_exec=8)
        img, p = obs()
        ex.step(img, p)
        ex.reset()
        ex.step(img, p)
        assert ex.plan_calls == 2


class TestPersistence:
    def test_save_load_act_close(self, tmp_path):
        policy = make_policy(seed=5)
        path = tmp_path / "p.vitc"
        policy.save(path)
        loaded = VitaPolicy.load(path)
        img, p = obs()
        # f32 on disk: round-off only
        np.testing.assert_allclose(loaded.act(img, p), policy.act(img, p),
                                   atol=1e-5)

    def test_meta_round_trip(self, tmp_path):
        policy = make_policy(seed=2, ae_mode="deterministic")
        path = tmp_path / "p.vitc"
        policy.save(path)
        loaded = VitaPolicy.load(path)
        assert loaded.model.cfg == policy.model.cfg
        assert loaded.t_exec == 8
        assert loaded.solver.num_steps == 6
        np.testing.assert_allclose(loaded.normalizer.mean,
                                   policy.normalizer.mean, atol=1e-7)

    def test_checkpoint_kind(self, tmp_path):
        policy = make_policy()
        path = tmp_path / "p.vitc"
        policy.save(path)
        assert checkpoint_kind(path) == 1

    def test_truncated_rejected(self, tmp_path):
        policy = make_policy()
        path = tmp_path / "p.vitc"
        policy.save(path)
        raw = path.read_bytes()
        bad = tmp_path / "bad.vitc"
        bad.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(FormatError):
            VitaPolicy.load(bad)

    def test_wrong_version_rejected(self, tmp_path):
        policy = make_policy()
        path = tmp_path / "p.vitc"
        policy.save(path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99  # version field
        bad = tmp_path / "v.vitc"
        bad.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            VitaPolicy.load(bad)

    def test_missing_tensor_rejected(self, tmp_path):
        from vita.checkpoint import load_tensors
        policy = make_policy()
        path = tmp_path / "p.vitc"
        policy.save(path)
        arrays, meta = load_tensors(path)
        del arrays["v.mlp.layers.0.w"]
        bad = tmp_path / "m.vitc"
        save_tensors(bad, arrays, meta=meta)
        with pytest.raises(FormatError):
            VitaPolicy.load(bad)

    def test_meta_truncation_rejected(self):
        with pytest.raises(FormatError):
            parse_policy_meta(b"\x01\x00\x00")
