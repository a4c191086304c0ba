import numpy as np
import pytest

from vita.checkpoint import FormatError
from vita.dataset import (Dataset, Demonstration, GenerationError,
                          generate_dataset, load_dataset, save_dataset)
from vita.envs import PushTLite, Reach2D


def tiny_dataset(n=3, seed=0):
    return generate_dataset(Reach2D(), n, seed)


def test_generation_keeps_only_successes():
    ds = tiny_dataset(4)
    assert len(ds.episodes) == 4
    assert all(ep.success for ep in ds.episodes)


def test_generation_deterministic_and_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.vitd", tmp_path / "b.vitd"
    save_dataset(p1, generate_dataset(Reach2D(), 3, seed=7))
    save_dataset(p2, generate_dataset(Reach2D(), 3, seed=7))
    assert p1.read_bytes() == p2.read_bytes()


def test_round_trip_byte_identical(tmp_path):
    ds = tiny_dataset(3)
    p1, p2 = tmp_path / "a.vitd", tmp_path / "b.vitd"
    save_dataset(p1, ds)
    save_dataset(p2, load_dataset(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_chunk_slicing_counts_and_padding():
    L, t_pred = 20, 16
    actions = np.arange(L * 2, dtype=np.float32).reshape(L, 2)
    ep = Demonstration(np.zeros((L, 64, 64, 3), np.uint8),
                       np.zeros((L, 2), np.float32), actions, True)
    imgs, props, chunks = Dataset([ep]).chunks(t_pred)
    assert chunks.shape == (20, 16, 2)
    # chunk row k equals episode action at min(t+k, L-1)
    for t in (0, 10, 19):
        for k in (0, 5, 15):
            np.testing.assert_array_equal(chunks[t, k], actions[min(t + k, L - 1)])


def test_starvation_error():
    class HopelessEnv(PushTLite):
        def success(self):
            return False

    with pytest.raises(GenerationError):
        generate_dataset(HopelessEnv(), 2, seed=0)


def test_bad_magic_and_truncation(tmp_path):
    good = tmp_path / "g.vitd"
    save_dataset(good, tiny_dataset(2))
    raw = good.read_bytes()

    bad = tmp_path / "bad.vitd"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_dataset(bad)

    trunc = tmp_path / "t.vitd"
    trunc.write_bytes(raw[:-100])
    with pytest.raises(FormatError):
        load_dataset(trunc)


def test_action_bounds_respected():
    ds = generate_dataset(PushTLite(), 2, seed=3)
    for ep in ds.episodes:
        assert np.abs(ep.actions).max() <= 0.1 + 1e-6
