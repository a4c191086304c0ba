"""Desk-scale imitation environments with deterministic dynamics and renders.

Reach2D: move the agent dot onto the goal dot (sanity task).
PushTLite: push a T-shaped block to a goal pose; a circular agent translates
the block by overlap resolution and rotates it via tangential contact motion.
"""

import numpy as np

from .autodiff import ContractError
from .policy import ChunkExecutor

IMAGE_HW = (64, 64)
MAX_ACT = 0.1


def wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _clip_step(v, limit):
    n = np.linalg.norm(v)
    if n > limit:
        return v * (limit / n)
    return v


# -- rendering ---------------------------------------------------------------

_ROWS, _COLS = np.mgrid[0:IMAGE_HW[0], 0:IMAGE_HW[1]]
_PX = (_COLS + 0.5) / IMAGE_HW[1]
_PY = (_ROWS + 0.5) / IMAGE_HW[0]


def _draw_disc(img, center, radius, color):
    mask = (_PX - center[0]) ** 2 + (_PY - center[1]) ** 2 <= radius**2
    img[mask] = color


def _draw_rot_rect(img, center, half_wh, angle, offset, color):
    """Rectangle in a rotated body frame: offset and half extents are given in
    the body frame; angle rotates the body relative to the arena."""
    c, s = np.cos(angle), np.sin(angle)
    dx = _PX - center[0]
    dy = _PY - center[1]
    u = c * dx + s * dy - offset[0]
    v = -s * dx + c * dy - offset[1]
    mask = (np.abs(u) <= half_wh[0]) & (np.abs(v) <= half_wh[1])
    img[mask] = color


def _draw_tee(img, pos, angle, color):
    # crossbar + stem make the orientation visible
    _draw_rot_rect(img, pos, (0.085, 0.026), angle, (0.0, 0.045), color)
    _draw_rot_rect(img, pos, (0.026, 0.052), angle, (0.0, -0.033), color)


# -- Reach2D -----------------------------------------------------------------


class Reach2D:
    name = "reach"
    d_action = 2
    proprio_dim = 2
    max_steps = 50
    image_hw = IMAGE_HW
    channels = 3

    GOAL_R = 0.05
    AGENT_R = 0.04
    SUCCESS_DIST = 0.04

    def __init__(self):
        self.agent = None
        self.goal = None
        self.steps = 0

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        while True:
            self.agent = rng.uniform(0.12, 0.88, size=2)
            self.goal = rng.uniform(0.12, 0.88, size=2)
            if np.linalg.norm(self.goal - self.agent) > 0.25:
                break
        self.steps = 0
        return self.observe()

    def observe(self):
        img = np.zeros(IMAGE_HW + (3,), dtype=np.uint8)
        _draw_disc(img, self.goal, self.GOAL_R, (40, 220, 40))
        _draw_disc(img, self.agent, self.AGENT_R, (60, 80, 255))
        return img, self.agent.astype(np.float32).copy()

    def success(self):
        return np.linalg.norm(self.agent - self.goal) < self.SUCCESS_DIST

    def step(self, action):
        a = np.asarray(action, dtype=np.float64)
        if np.isnan(a).any():
            raise ContractError("NaN action")
        a = np.clip(a, -MAX_ACT, MAX_ACT)
        self.agent = np.clip(self.agent + a, self.AGENT_R, 1 - self.AGENT_R)
        self.steps += 1
        success = self.success()
        done = success or self.steps >= self.max_steps
        return self.observe(), done, success

    def expert_action(self):
        err = self.goal - self.agent
        if np.linalg.norm(err) < 1e-3:
            return np.zeros(2)
        return _clip_step(err, 0.07)


# -- PushTLite ---------------------------------------------------------------


class PushTLite:
    name = "pusht"
    d_action = 2
    proprio_dim = 2
    max_steps = 200  # ~2.5x the scripted expert's worst case
    image_hw = IMAGE_HW
    channels = 3

    AGENT_R = 0.035
    BLOCK_R = 0.08
    ROT_K = 0.25
    GOAL_POS = np.array([0.5, 0.5])
    GOAL_ANG = 0.0
    POS_TOL = 0.05
    ANG_TOL = 0.2

    def __init__(self):
        self.agent = None
        self.block = None
        self.angle = 0.0
        self.steps = 0

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.13, 0.24)
        self.block = np.clip(
            self.GOAL_POS + dist * np.array([np.cos(ang), np.sin(ang)]),
            0.22, 0.78)
        self.angle = rng.uniform(-0.5, 0.5)
        while True:
            self.agent = rng.uniform(0.08, 0.92, size=2)
            if np.linalg.norm(self.agent - self.block) > \
                    self.AGENT_R + self.BLOCK_R + 0.05:
                break
        self.steps = 0
        return self.observe()

    _GOAL_LAYER = None  # rendered once; the goal marker never moves

    def observe(self):
        if PushTLite._GOAL_LAYER is None:
            layer = np.zeros(IMAGE_HW + (3,), dtype=np.uint8)
            _draw_tee(layer, self.GOAL_POS, self.GOAL_ANG, (0, 110, 0))
            PushTLite._GOAL_LAYER = layer
        img = PushTLite._GOAL_LAYER.copy()
        _draw_tee(img, self.block, self.angle, (230, 50, 50))
        _draw_disc(img, self.agent, self.AGENT_R, (60, 80, 255))
        return img, self.agent.astype(np.float32).copy()

    def success(self):
        return (np.linalg.norm(self.block - self.GOAL_POS) < self.POS_TOL
                and abs(wrap_angle(self.angle - self.GOAL_ANG)) < self.ANG_TOL)

    def step(self, action):
        a = np.asarray(action, dtype=np.float64)
        if np.isnan(a).any():
            raise ContractError("NaN action")
        a = np.clip(a, -MAX_ACT, MAX_ACT)
        old = self.agent.copy()
        self.agent = np.clip(self.agent + a, self.AGENT_R, 1 - self.AGENT_R)
        move = self.agent - old
        cd = self.AGENT_R + self.BLOCK_R
        rel = self.agent - self.block
        dist = np.linalg.norm(rel)
        if dist < cd:
            n = rel / dist if dist > 1e-9 else np.array([1.0, 0.0])
            pen = cd - dist
            self.block = self.block - n * pen
            tangent = np.array([-n[1], n[0]])
            self.angle = wrap_angle(self.angle + self.ROT_K * (move @ tangent)
                                    / self.BLOCK_R)
            clipped = np.clip(self.block, self.BLOCK_R, 1 - self.BLOCK_R)
            if not np.array_equal(clipped, self.block):
                self.block = clipped
                self.agent = self.block + n * cd
        self.steps += 1
        success = self.success()
        done = success or self.steps >= self.max_steps
        return self.observe(), done, success

    # -- scripted expert -----------------------------------------------------

    ANG_GO = 0.08
    POS_GO = 0.025

    def expert_action(self):
        cd = self.AGENT_R + self.BLOCK_R
        rel = self.agent - self.block
        dist = np.linalg.norm(rel)
        perr = self.GOAL_POS - self.block
        aerr = wrap_angle(self.GOAL_ANG - self.angle)

        if abs(aerr) > self.ANG_GO:
            ring = cd - 0.012
            if dist > cd + 0.02:
                target = self.block + rel / dist * ring
                return _clip_step(target - self.agent, 0.08)
            n = rel / max(dist, 1e-9)
            tangent = np.array([-n[1], n[0]])
            tstep = np.sign(aerr) * min(0.04,
                                        0.9 * self.BLOCK_R * abs(aerr) / self.ROT_K)
            return _clip_step(tangent * tstep + n * (ring - dist), MAX_ACT)

        if np.linalg.norm(perr) > self.POS_GO:
            pd = perr / np.linalg.norm(perr)
            behind = self.block - pd * (cd - 0.002)
            to_b = behind - self.agent
            if np.linalg.norm(to_b) > 0.02:
                return self._navigate(behind, cd)
            return pd * min(0.035, np.linalg.norm(perr))

        return np.zeros(2)

    def _navigate(self, target, cd):
        """Move toward target, orbiting the block while the bearing is off."""
        rel = self.agent - self.block
        dist = np.linalg.norm(rel)
        trel = target - self.block
        psi = wrap_angle(np.arctan2(trel[1], trel[0])
                         - np.arctan2(rel[1], rel[0]))
        if abs(psi) < 0.4:
            # near the target's bearing: descend straight onto it
            return _clip_step(target - self.agent, 0.07)
        n = rel / max(dist, 1e-9)
        # orbit direction is stable: shortest way, committed counter-clockwise
        # on the far half so it cannot dither at the antipode
        direction = -1.0 if -np.pi / 2 < psi < 0 else 1.0
        tangent = np.array([-n[1], n[0]]) * direction
        radius_des = cd + 0.035
        return _clip_step(tangent * 0.06 + n * (radius_des - dist), MAX_ACT)


ENVS = {"reach": Reach2D, "pusht": PushTLite}


def make_env(name):
    try:
        return ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown task {name!r} (choose from {sorted(ENVS)})")


def scripted_expert(env):
    """Deterministic waypoint controller for the given environment state."""
    return env.expert_action()


class ExpertAgent:
    """Adapter exposing the scripted expert through the rollout interface."""

    def __init__(self, env):
        self.env = env

    def step(self, image, proprio=None):
        return scripted_expert(self.env)

    def reset(self):
        pass


def rollout(agent, env, seed):
    """One episode; agent exposes step(image, proprio) -> action."""
    image, proprio = env.reset(seed)
    if hasattr(agent, "reset"):
        agent.reset()
    length = 0
    while True:
        action = agent.step(image, proprio)
        (image, proprio), done, success = env.step(action)
        length += 1
        if done:
            return bool(success), length


def evaluate(policy, env, n_episodes=50, seed=0):
    """ChunkExecutor-driven evaluation; returns per-episode outcomes.

    policy may be anything with act(image, proprio) -> chunk, or an agent
    already exposing step(image, proprio) -> action.
    """
    results = []
    for ep in range(n_episodes):
        if hasattr(policy, "act"):
            agent = ChunkExecutor(policy)
        else:
            agent = policy
        success, length = rollout(agent, env, seed + ep)
        results.append((seed + ep, ep, success, length))
    sr = sum(r[2] for r in results) / n_episodes
    return sr, results
