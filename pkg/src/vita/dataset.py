"""Demonstration collection and the VITD dataset file format.

Layout (little-endian):
    magic "VITD" | u32 version=1 | u32 H, W, C, D_action, proprio_dim,
    episode count | per episode: u32 length | u8 success |
    length x (image u8[H*W*C], proprio f32[proprio_dim], action f32[D_action])
"""

import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from .checkpoint import FormatError
from .envs import scripted_expert

MAGIC = b"VITD"
VERSION = 1


class GenerationError(RuntimeError):
    pass


@dataclass
class Demonstration:
    images: np.ndarray   # [L, H, W, C] uint8
    proprio: np.ndarray  # [L, P] float32
    actions: np.ndarray  # [L, D] float32
    success: bool


@dataclass
class Dataset:
    episodes: list

    @property
    def d_action(self):
        return self.episodes[0].actions.shape[1]

    @property
    def proprio_dim(self):
        return self.episodes[0].proprio.shape[1]

    @property
    def image_shape(self):
        return self.episodes[0].images.shape[1:]

    def chunks(self, t_pred):
        """Slice every episode into per-step chunks of t_pred future actions,
        end-padded by repeating the final action.

        Returns (images [N,H,W,C] u8, proprio [N,P] f32, chunks [N,t_pred,D] f32).
        """
        imgs, props, chunks = [], [], []
        for ep in self.episodes:
            L = len(ep.actions)
            idx = np.minimum(np.arange(L)[:, None] + np.arange(t_pred)[None, :],
                             L - 1)
            imgs.append(ep.images)
            props.append(ep.proprio)
            chunks.append(ep.actions[idx])
        return (np.concatenate(imgs), np.concatenate(props),
                np.concatenate(chunks))

    def all_actions(self):
        return np.concatenate([ep.actions for ep in self.episodes])


def collect_episode(env, seed):
    """Roll out the scripted expert once; observations precede their actions."""
    image, proprio = env.reset(seed)
    images, props, acts = [], [], []
    success = False
    while True:
        action = scripted_expert(env)
        images.append(image)
        props.append(proprio)
        acts.append(np.asarray(action, dtype=np.float32))
        (image, proprio), done, success = env.step(action)
        if done:
            break
    return Demonstration(np.stack(images), np.stack(props).astype(np.float32),
                         np.stack(acts), bool(success))


def generate_dataset(env, n_episodes, seed):
    """Collect n successful expert episodes; seeds advance deterministically."""
    if n_episodes < 1:
        raise GenerationError("need at least one episode")
    episodes = []
    attempt = 0
    while len(episodes) < n_episodes:
        if attempt > 10 * n_episodes:
            raise GenerationError(
                f"expert succeeded only {len(episodes)}/{n_episodes} times "
                f"in {attempt} attempts")
        demo = collect_episode(env, seed * 1_000_003 + attempt)
        attempt += 1
        if demo.success:
            episodes.append(demo)
    return Dataset(episodes)


def save_dataset(path, ds: Dataset):
    h, w, c = ds.image_shape
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<7I", VERSION, h, w, c, ds.d_action, ds.proprio_dim,
                          len(ds.episodes)))
    for ep in ds.episodes:
        buf.write(struct.pack("<IB", len(ep.actions), int(ep.success)))
        for i in range(len(ep.actions)):
            buf.write(ep.images[i].tobytes())
            buf.write(ep.proprio[i].astype("<f4").tobytes())
            buf.write(ep.actions[i].astype("<f4").tobytes())
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def _read_exact(f, n, what):
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"truncated dataset while reading {what}")
    return b


def load_dataset(path):
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise FormatError("bad magic: not a VITD dataset")
        version, h, w, c, d_action, p_dim, n_eps = struct.unpack(
            "<7I", _read_exact(f, 28, "header"))
        if version != VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        episodes = []
        img_n = h * w * c
        for _ in range(n_eps):
            length, success = struct.unpack("<IB", _read_exact(f, 5, "episode header"))
            images = np.empty((length, h, w, c), dtype=np.uint8)
            proprio = np.empty((length, p_dim), dtype=np.float32)
            actions = np.empty((length, d_action), dtype=np.float32)
            for i in range(length):
                images[i] = np.frombuffer(
                    _read_exact(f, img_n, "image"), dtype=np.uint8).reshape(h, w, c)
                proprio[i] = np.frombuffer(
                    _read_exact(f, 4 * p_dim, "proprio"), dtype="<f4")
                actions[i] = np.frombuffer(
                    _read_exact(f, 4 * d_action, "action"), dtype="<f4")
            episodes.append(Demonstration(images, proprio, actions, bool(success)))
        if f.read(1):
            raise FormatError("trailing bytes after last episode")
    return Dataset(episodes)
