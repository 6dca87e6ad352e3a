"""Task-space velocity-tracking environment driven by the learned
actuator models.

Observations carry the measured and goal end-effector velocity plus each
active joint's 0.6 s history window (162 values total, fixed layout).
Reward is 1 / (1 + ||v_d - v_ee||). Episodes reset to a random arm
configuration; a spawn that intersects the ground terminates immediately
with zero reward.
"""

from dataclasses import dataclass

import numpy as np

from .actuator import WINDOW_TICKS, WindowBuffer
from .machine import ACTIVE_JOINTS, DT, forward_kinematics, chain_points
from .plant import decode_pwm, encode_duty

OBS_DIM = 6 + len(ACTIVE_JOINTS) * 3 * WINDOW_TICKS  # 162
ACTION_DIM = len(ACTIVE_JOINTS)

# Frozen observation ordering; stored in checkpoints so a policy is never
# fed a layout it was not trained on.
OBS_LAYOUT = "obs-v1:v_ee(3),v_d(3),then per joint q1,q3,q4,q5: q(13),qd(13),duty(13)"


@dataclass
class EnvConfig:
    episode_len: int = 200             # ticks (10 s)
    noise_amplitude: float = 0.05      # fraction of per-feature std
    goal_speed_max: float = 0.5        # m/s
    reset_range_fraction: float = 0.9  # reset samples this fraction of each range
    num_envs: int = 16

    def __post_init__(self):
        if self.episode_len < 1:
            raise ValueError("episode_len must be >= 1")
        if not 0.0 <= self.noise_amplitude <= 1.0:
            raise ValueError("noise_amplitude must be in [0, 1]")
        if self.num_envs < 1:
            raise ValueError("num_envs must be >= 1")


def env_config_from(cfg):
    e = cfg["env"]
    return EnvConfig(
        episode_len=e["episode_len"],
        noise_amplitude=e["noise_amplitude"],
        goal_speed_max=e["goal_speed_max"],
        reset_range_fraction=e["reset_range_fraction"],
        num_envs=e["num_envs"],
    )


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    done_reason: str = None  # "timeout" | "ground_spawn" when done


def reward_from_error(err_norm):
    return 1.0 / (1.0 + err_norm)


def sample_goal_velocity(rng, cfg):
    """Goal velocity: direction uniform on the sphere, speed uniform."""
    vec = rng.normal(size=3)
    norm = np.linalg.norm(vec)
    while norm < 1e-12:
        vec = rng.normal(size=3)
        norm = np.linalg.norm(vec)
    speed = rng.uniform(0.0, cfg.goal_speed_max)
    return vec / norm * speed


def ground_collision(params, q):
    """True when any link endpoint beyond the shoulder is strictly below
    ground (z < 0; touching z = 0 does not count)."""
    pts = chain_points(params, q)
    return bool(np.any(pts[1:, 2] < 0.0))


class EnvDoneError(RuntimeError):
    pass


class TaskSpaceEnv:
    """Single environment; owns its RNG stream and window buffers."""

    def __init__(self, params, models, cfg, seed):
        missing = [j for j in ACTIVE_JOINTS if j not in models]
        if missing:
            raise ValueError(f"missing actuator models for joints {missing}")
        self.params = params
        self.models = models
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.done = True
        self.done_reason = None

    def reset(self):
        """Sample a fresh episode; returns the raw observation."""
        lims = self.params.joint_limits
        center = lims.mean(axis=1)
        half = 0.5 * (lims[:, 1] - lims[:, 0]) * self.cfg.reset_range_fraction
        q = self.rng.uniform(center - half, center + half)
        q[1] = self.params.q2_fixed_angle
        self.q = q
        self.v = np.zeros(5)
        self.buffers = {j: WindowBuffer(q[j]) for j in ACTIVE_JOINTS}
        self.goal = sample_goal_velocity(self.rng, self.cfg)
        self.pos = forward_kinematics(self.params, q).position
        self.v_ee = np.zeros(3)
        self.tick = 0
        if ground_collision(self.params, q):
            self.done = True
            self.done_reason = "ground_spawn"
        else:
            self.done = False
            self.done_reason = None
        return self.observe()

    def observe(self):
        """Raw (unnormalized, noise-free) observation vector."""
        parts = [self.v_ee, self.goal]
        for j in ACTIVE_JOINTS:
            parts.append(self.buffers[j].vector())
        return np.concatenate(parts)

    def step(self, action):
        """Advance one tick under a 4-vector action in [-1, 1]."""
        if self.done:
            raise EnvDoneError("cannot step a finished episode; reset first")
        action = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        if action.shape != (ACTION_DIM,):
            raise ValueError(f"action must have shape ({ACTION_DIM},)")
        lo, hi = self.params.joint_limits[:, 0], self.params.joint_limits[:, 1]
        for a, j in zip(action, ACTIVE_JOINTS):
            # The PWM quantization the real command path would apply.
            duty = decode_pwm(encode_duty(a * self.params.duty_cap), self.params.duty_cap)
            buf = self.buffers[j]
            buf.push(self.q[j], self.v[j], duty)
            v_next = self.models[j].predict(buf)
            q_next = self.q[j] + v_next * DT
            if q_next <= lo[j]:
                q_next = lo[j]
                if v_next < 0:
                    v_next = 0.0
            elif q_next >= hi[j]:
                q_next = hi[j]
                if v_next > 0:
                    v_next = 0.0
            self.q[j] = q_next
            self.v[j] = v_next

        new_pos = forward_kinematics(self.params, self.q).position
        self.v_ee = (new_pos - self.pos) / DT
        self.pos = new_pos
        self.tick += 1
        reward = reward_from_error(float(np.linalg.norm(self.goal - self.v_ee)))
        if self.tick >= self.cfg.episode_len:
            self.done = True
            self.done_reason = "timeout"
        return StepResult(self.observe(), reward, self.done, self.done_reason)


class VecEnv:
    """Batch of independent environments stepped by a plain loop.

    The loop keeps batched stepping semantically identical (bit-exact) to
    stepping each environment on its own. Per-env RNG streams derive from
    (seed, env index) so scheduling cannot change results. A shared
    normalizer (when given) standardizes observations; uniform noise of
    +/- noise_amplitude in normalized units is added during training only.
    """

    def __init__(self, params, models, cfg, seed, normalizer=None,
                 noise=True, update_stats=True):
        self.cfg = cfg
        self.envs = [
            TaskSpaceEnv(params, models, cfg, np.random.default_rng([seed, i]).integers(2**63))
            for i in range(cfg.num_envs)
        ]
        self.noise_rngs = [np.random.default_rng([seed, i, 1]) for i in range(cfg.num_envs)]
        self.normalizer = normalizer
        self.noise = noise
        self.update_stats = update_stats
        self.obs = None

    def _process(self, i, raw):
        if self.normalizer is not None:
            if self.update_stats:
                self.normalizer.update(raw[None, :])
            out = self.normalizer.normalize(raw)
        else:
            out = raw.copy()
        if self.noise and self.cfg.noise_amplitude > 0:
            out = out + self.noise_rngs[i].uniform(
                -self.cfg.noise_amplitude, self.cfg.noise_amplitude, size=out.shape
            )
        return out

    def reset_all(self):
        self.obs = np.stack(
            [self._process(i, env.reset()) for i, env in enumerate(self.envs)]
        )
        return self.obs

    def step(self, actions):
        """Step every env; finished envs auto-reset after reporting.

        Returns (rewards, dones, done_reasons); the post-step (post-reset)
        observations live in self.obs.
        """
        actions = np.asarray(actions, dtype=float)
        if actions.shape != (len(self.envs), ACTION_DIM):
            raise ValueError(f"actions must have shape ({len(self.envs)}, {ACTION_DIM})")
        rewards = np.zeros(len(self.envs))
        dones = np.zeros(len(self.envs), dtype=bool)
        reasons = [None] * len(self.envs)
        for i, env in enumerate(self.envs):
            if env.done and env.done_reason == "ground_spawn":
                # Episode born in collision: report it, pay no reward.
                rewards[i] = 0.0
                dones[i] = True
                reasons[i] = "ground_spawn"
                raw = env.reset()
            else:
                res = env.step(actions[i])
                rewards[i] = res.reward
                dones[i] = res.done
                reasons[i] = res.done_reason
                raw = env.reset() if res.done else env.observe()
            self.obs[i] = self._process(i, raw)
        return rewards, dones, reasons
