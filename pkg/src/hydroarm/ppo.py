"""Proximal Policy Optimization with GAE over the vectorized environment.

Gaussian policy with a state-independent learned log-std; actions are
sampled, log-probs evaluated, and only then clipped to [-1, 1] for the
environment. Updates use the clipped surrogate objective with per-batch
advantage normalization. All randomness flows from named sub-seeds of one
run seed, and reductions keep a fixed order, so training is bit-
reproducible and resumable from a checkpoint snapshot.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .config import derive_seed
from .env import ACTION_DIM, OBS_DIM, OBS_LAYOUT, EnvConfig, VecEnv
from .neural import (
    AdamState,
    MlpSpec,
    Normalizer,
    adam_step,
    init_mlp,
    load_weights,
    mlp_backward,
    mlp_forward,
    save_weights,
)

POLICY_SPEC = MlpSpec((OBS_DIM, 256, 128, 64, ACTION_DIM), "elu", "linear")
VALUE_SPEC = MlpSpec((OBS_DIM, 256, 128, 64, 1), "elu", "linear")

LOG_STD_INIT = -0.5
LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    epochs: int = 4
    minibatches: int = 4
    horizon: int = 64
    entropy_coef: float = 0.0
    value_coef: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_epsilon <= 0.0:
            raise ValueError("clip_epsilon must be positive")


def ppo_config_from(cfg):
    p = cfg["ppo"]
    return PpoConfig(
        gamma=p["gamma"],
        gae_lambda=p["gae_lambda"],
        clip_epsilon=p["clip_epsilon"],
        learning_rate=p["learning_rate"],
        epochs=p["epochs"],
        minibatches=p["minibatches"],
        horizon=p["horizon"],
        entropy_coef=p["entropy_coef"],
        value_coef=p["value_coef"],
    )


class GaussianPolicy:
    """MLP mean head plus a learned per-action log-std vector."""

    def __init__(self, weights, log_std=None):
        self.weights = weights
        dim = weights.spec.layer_sizes[-1]
        self.log_std = np.full(dim, LOG_STD_INIT) if log_std is None else np.asarray(
            log_std, dtype=float
        ).copy()

    @classmethod
    def fresh(cls, rng, spec=POLICY_SPEC, out_scale=0.01):
        weights = init_mlp(spec, rng)
        # Shrink the mean head so initial actions sit near zero inside the
        # [-1, 1] bounds; a large initial mean clips every sample to the
        # same bound and erases the reward signal.
        W, b = weights.layers[-1]
        weights.layers[-1] = (W * out_scale, b)
        return cls(weights)

    def mean(self, obs):
        out, cache = mlp_forward(self.weights, obs)
        return out, cache

    def std(self):
        return np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))

    def log_prob(self, mean, actions):
        """Diagonal-Gaussian log density of pre-clip actions, batched."""
        std = self.std()
        z = (actions - mean) / std
        return -0.5 * np.sum(z * z + 2.0 * np.log(std) + LOG_2PI, axis=-1)

    def act(self, obs, rng=None, deterministic=False):
        """Sample (or take the mean) action for a batch of observations.

        Returns (env_action, raw_action, log_prob); env_action is clipped
        to [-1, 1], raw_action is what the log-prob belongs to.
        """
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        mean, _ = self.mean(obs)
        if deterministic:
            raw = mean
            logp = self.log_prob(mean, raw)
        else:
            if rng is None:
                raise ValueError("stochastic action needs an rng")
            raw = mean + rng.normal(size=mean.shape) * self.std()
            logp = self.log_prob(mean, raw)
        return np.clip(raw, -1.0, 1.0), raw, logp


def policy_act(policy, observation, rng=None, deterministic=False):
    """Single-observation action; clipped to [-1, 1]."""
    env_action, _, _ = policy.act(observation[None, :], rng, deterministic)
    return env_action[0]


class RolloutBuffer:
    """Fixed-horizon on-policy storage, horizon x num_envs."""

    def __init__(self, horizon, num_envs, obs_dim=OBS_DIM, act_dim=ACTION_DIM):
        self.obs = np.zeros((horizon, num_envs, obs_dim))
        self.actions = np.zeros((horizon, num_envs, act_dim))
        self.log_probs = np.zeros((horizon, num_envs))
        self.rewards = np.zeros((horizon, num_envs))
        self.values = np.zeros((horizon, num_envs))
        self.dones = np.zeros((horizon, num_envs), dtype=bool)
        self.advantages = None
        self.returns = None
        self.horizon = horizon
        self.pos = 0

    def add(self, obs, actions, log_probs, rewards, values, dones):
        if self.pos >= self.horizon:
            raise ValueError("buffer already full")
        self.obs[self.pos] = obs
        self.actions[self.pos] = actions
        self.log_probs[self.pos] = log_probs
        self.rewards[self.pos] = rewards
        self.values[self.pos] = values
        self.dones[self.pos] = dones
        self.pos += 1

    @property
    def full(self):
        return self.pos == self.horizon

    def clear(self):
        self.pos = 0


def compute_gae(rewards, values, dones, bootstrap_value, gamma, lam):
    """Generalized advantage estimation over (H,) or (H, N) arrays.

    delta_t = r_t + gamma * v_{t+1} * (1 - done_t) - v_t
    A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}
    returns = A + values
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards/values/dones must share a shape")
    horizon = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    last_gae = np.zeros_like(np.atleast_1d(rewards[0]), dtype=float)
    bootstrap = np.broadcast_to(np.asarray(bootstrap_value, dtype=float), last_gae.shape)
    for t in range(horizon - 1, -1, -1):
        not_done = 1.0 - dones[t].astype(float)
        next_value = bootstrap if t == horizon - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        last_gae = delta + gamma * lam * not_done * last_gae
        advantages[t] = last_gae
    return advantages, advantages + values


def surrogate_loss_and_grads(policy, obs, actions, old_log_probs, advantages, cfg):
    """Clipped-surrogate loss with exact gradients for policy params.

    Returns (loss, trunk_grads, log_std_grad, stats). The per-sample
    gradient flows only where the unclipped branch attains the min; the
    clipped branch is flat in rho wherever it binds.
    """
    mean, cache = policy.mean(obs)
    std = policy.std()
    new_logp = policy.log_prob(mean, actions)
    ratio = np.exp(new_logp - old_log_probs)
    eps = cfg.clip_epsilon
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    surrogate = np.minimum(unclipped, clipped)
    loss = -float(np.mean(surrogate))

    batch = len(advantages)
    active = unclipped <= clipped  # gradient flows through the ratio branch
    coeff = np.where(active, ratio * advantages, 0.0) / batch

    z = (actions - mean) / std
    # d(-surr)/d(mean_k) = -coeff * d(logp)/d(mean_k); d logp/d mean = z/std
    grad_mean = -coeff[:, None] * z / std
    grad_log_std = -(coeff[:, None] * (z * z - 1.0)).sum(axis=0)
    if cfg.entropy_coef:
        # Gaussian entropy depends only on log_std; d(-coef*H)/d(log_std) = -coef
        loss -= cfg.entropy_coef * float(np.sum(policy.log_std + 0.5 * (LOG_2PI + 1.0)))
        grad_log_std -= cfg.entropy_coef
    trunk_grads, _ = mlp_backward(policy.weights, cache, grad_mean)

    clip_frac = float(np.mean(np.abs(ratio - 1.0) > eps))
    kl = float(np.mean(old_log_probs - new_logp))
    return loss, trunk_grads, grad_log_std, {"clip_frac": clip_frac, "kl": kl}


def value_loss_and_grads(value_net, obs, returns, value_coef):
    pred, cache = mlp_forward(value_net, obs)
    diff = pred[:, 0] - returns
    loss = float(np.mean(diff**2))
    grad_out = (value_coef * 2.0 * diff / len(diff))[:, None]
    grads, _ = mlp_backward(value_net, cache, grad_out)
    return loss, grads


def _flatten_grads(trunk_grads, extra=None):
    flat = []
    for gW, gb in trunk_grads:
        flat.extend([gW, gb])
    if extra is not None:
        flat.append(extra)
    return flat


def ppo_update(policy, value_net, buffer, cfg, policy_adam, value_adam, shuffle_rng):
    """One PPO update over a full buffer; returns aggregate stats."""
    if not buffer.full:
        raise ValueError("buffer must be full before updating")
    horizon, num_envs = buffer.rewards.shape
    obs = buffer.obs.reshape(horizon * num_envs, -1)
    actions = buffer.actions.reshape(horizon * num_envs, -1)
    old_logp = buffer.log_probs.reshape(-1)
    advantages = buffer.advantages.reshape(-1)
    returns = buffer.returns.reshape(-1)

    advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    n = len(obs)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "clip_frac": 0.0, "kl": 0.0}
    count = 0
    policy_params = list(policy.weights.parameters()) + [policy.log_std]
    value_params = list(value_net.parameters())
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for chunk in np.array_split(order, cfg.minibatches):
            loss_pi, trunk_grads, g_logstd, s = surrogate_loss_and_grads(
                policy, obs[chunk], actions[chunk], old_logp[chunk],
                advantages[chunk], cfg,
            )
            loss_v, v_grads = value_loss_and_grads(
                value_net, obs[chunk], returns[chunk], cfg.value_coef
            )
            if not (np.isfinite(loss_pi) and np.isfinite(loss_v)):
                raise FloatingPointError(
                    f"non-finite PPO loss (policy {loss_pi}, value {loss_v})"
                )
            adam_step(policy_params, _flatten_grads(trunk_grads, g_logstd), policy_adam)
            policy.weights.version += 1
            np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX, out=policy.log_std)
            adam_step(value_params, _flatten_grads(v_grads), value_adam)
            value_net.version += 1
            stats["policy_loss"] += loss_pi
            stats["value_loss"] += loss_v
            stats["clip_frac"] += s["clip_frac"]
            stats["kl"] += s["kl"]
            count += 1
    for key in stats:
        stats[key] /= count
    return stats


REWARD_CURVE_HEADER = ["update", "env_steps", "mean_reward", "clip_frac", "kl"]


class PpoTrainer:
    """Collect-update loop binding policy, value, and the vec env."""

    def __init__(self, params, models, env_cfg, ppo_cfg, seed, machine_cfg_hash=""):
        self.env_cfg = env_cfg
        self.ppo_cfg = ppo_cfg
        self.seed = seed
        self.machine_cfg_hash = machine_cfg_hash
        self.normalizer = Normalizer.for_dim(OBS_DIM)
        self.vec = VecEnv(
            params, models, env_cfg, derive_seed(seed, "envs"),
            normalizer=self.normalizer, noise=True, update_stats=True,
        )
        init_rng = np.random.default_rng(derive_seed(seed, "init"))
        self.policy = GaussianPolicy.fresh(init_rng)
        self.value_net = init_mlp(VALUE_SPEC, init_rng)
        self.policy_adam = AdamState(learning_rate=ppo_cfg.learning_rate)
        self.value_adam = AdamState(learning_rate=ppo_cfg.learning_rate)
        self.act_rng = np.random.default_rng(derive_seed(seed, "act"))
        self.shuffle_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
        self.update_count = 0
        self.env_steps = 0
        self.reward_rows = []

    def collect(self):
        buffer = RolloutBuffer(self.ppo_cfg.horizon, self.env_cfg.num_envs)
        if self.vec.obs is None:
            self.vec.reset_all()
        for _ in range(self.ppo_cfg.horizon):
            obs = self.vec.obs.copy()
            env_actions, raw_actions, logp = self.policy.act(obs, self.act_rng)
            values, _ = mlp_forward(self.value_net, obs)
            rewards, dones, _ = self.vec.step(env_actions)
            buffer.add(obs, raw_actions, logp, rewards, values[:, 0], dones)
        bootstrap, _ = mlp_forward(self.value_net, self.vec.obs)
        buffer.advantages, buffer.returns = compute_gae(
            buffer.rewards, buffer.values, buffer.dones, bootstrap[:, 0],
            self.ppo_cfg.gamma, self.ppo_cfg.gae_lambda,
        )
        self.env_steps += self.ppo_cfg.horizon * self.env_cfg.num_envs
        return buffer

    def train(self, total_env_steps, out_dir=None, checkpoint_every=50, log=None):
        """Run updates until total_env_steps; returns the reward-curve rows."""
        steps_per_update = self.ppo_cfg.horizon * self.env_cfg.num_envs
        n_updates = max(1, int(np.ceil(total_env_steps / steps_per_update)))
        for _ in range(n_updates):
            buffer = self.collect()
            mean_reward = float(buffer.rewards.mean())
            stats = ppo_update(
                self.policy, self.value_net, buffer, self.ppo_cfg,
                self.policy_adam, self.value_adam, self.shuffle_rng,
            )
            self.update_count += 1
            row = [
                self.update_count, self.env_steps, mean_reward,
                stats["clip_frac"], stats["kl"],
            ]
            self.reward_rows.append(row)
            if log:
                log(
                    f"update {self.update_count}: steps={self.env_steps} "
                    f"reward={mean_reward:.4f} clip={stats['clip_frac']:.3f} "
                    f"kl={stats['kl']:.5f}"
                )
            if out_dir and self.update_count % checkpoint_every == 0:
                self.save_checkpoint(
                    os.path.join(out_dir, f"ckpt_{self.update_count:06d}")
                )
        if out_dir:
            self.save_checkpoint(os.path.join(out_dir, "ckpt_final"))
        return self.reward_rows

    def write_reward_curve(self, path):
        from .records import write_csv

        write_csv(path, REWARD_CURVE_HEADER, self.reward_rows)

    # -- checkpointing ----------------------------------------------------

    def save_checkpoint(self, directory):
        """Full training snapshot: weights plus every piece of mutable
        state needed to continue bit-exactly (optimizer moments, RNG
        states, running normalizer, live env states)."""
        os.makedirs(directory, exist_ok=True)
        save_weights(
            os.path.join(directory, "policy.json"),
            self.policy.weights,
            normalizers={"obs": self.normalizer},
            metadata={
                "kind": "policy",
                "log_std": self.policy.log_std.tolist(),
                "obs_layout": OBS_LAYOUT,
                "machine_cfg_hash": self.machine_cfg_hash,
            },
        )
        save_weights(
            os.path.join(directory, "value.json"), self.value_net,
            metadata={"kind": "value"},
        )
        runtime = {
            "update_count": self.update_count,
            "env_steps": self.env_steps,
            "ppo_config": self.ppo_cfg.__dict__,
            "env_config": self.env_cfg.__dict__,
            "seed": self.seed,
            "obs_layout": OBS_LAYOUT,
            "reward_rows": self.reward_rows,
            "policy_adam": _adam_to_json(self.policy_adam),
            "value_adam": _adam_to_json(self.value_adam),
            "act_rng": self.act_rng.bit_generator.state,
            "shuffle_rng": self.shuffle_rng.bit_generator.state,
            "vec_env": _vec_state(self.vec),
        }
        with open(os.path.join(directory, "trainer.json"), "w") as fh:
            json.dump(runtime, fh)

    def restore(self, directory):
        weights, norms, meta = load_weights(os.path.join(directory, "policy.json"))
        if meta.get("obs_layout") != OBS_LAYOUT:
            raise ValueError("checkpoint observation layout does not match")
        self.policy = GaussianPolicy(weights, meta["log_std"])
        self.value_net, _, _ = load_weights(os.path.join(directory, "value.json"))
        with open(os.path.join(directory, "trainer.json")) as fh:
            runtime = json.load(fh)
        self.update_count = runtime["update_count"]
        self.env_steps = runtime["env_steps"]
        self.reward_rows = [list(r) for r in runtime["reward_rows"]]
        self.policy_adam = _adam_from_json(runtime["policy_adam"], self.ppo_cfg.learning_rate)
        self.value_adam = _adam_from_json(runtime["value_adam"], self.ppo_cfg.learning_rate)
        self.act_rng.bit_generator.state = runtime["act_rng"]
        self.shuffle_rng.bit_generator.state = runtime["shuffle_rng"]
        norm = norms["obs"]
        self.normalizer.mean, self.normalizer.var = norm.mean, norm.var
        self.normalizer.count = norm.count
        _restore_vec(self.vec, runtime["vec_env"])


def _adam_to_json(state):
    return {
        "learning_rate": state.learning_rate,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "epsilon": state.epsilon,
        "step_count": state.step_count,
        "m": [a.tolist() for a in state.m],
        "v": [a.tolist() for a in state.v],
    }


def _adam_from_json(doc, default_lr):
    return AdamState(
        learning_rate=doc.get("learning_rate", default_lr),
        beta1=doc["beta1"],
        beta2=doc["beta2"],
        epsilon=doc["epsilon"],
        step_count=doc["step_count"],
        m=[np.asarray(a) for a in doc["m"]],
        v=[np.asarray(a) for a in doc["v"]],
    )


def _vec_state(vec):
    envs = []
    for env in vec.envs:
        envs.append(
            {
                "q": env.q.tolist(),
                "v": env.v.tolist(),
                "goal": env.goal.tolist(),
                "pos": env.pos.tolist(),
                "v_ee": env.v_ee.tolist(),
                "tick": env.tick,
                "done": env.done,
                "done_reason": env.done_reason,
                "buffers": {str(j): buf.data.tolist() for j, buf in env.buffers.items()},
                "rng": env.rng.bit_generator.state,
            }
        )
    return {
        "envs": envs,
        "noise_rngs": [r.bit_generator.state for r in vec.noise_rngs],
        "obs": None if vec.obs is None else vec.obs.tolist(),
    }


def _restore_vec(vec, doc):
    from .actuator import WindowBuffer

    for env, st in zip(vec.envs, doc["envs"]):
        env.q = np.asarray(st["q"])
        env.v = np.asarray(st["v"])
        env.goal = np.asarray(st["goal"])
        env.pos = np.asarray(st["pos"])
        env.v_ee = np.asarray(st["v_ee"])
        env.tick = st["tick"]
        env.done = st["done"]
        env.done_reason = st["done_reason"]
        env.buffers = {}
        for j, data in st["buffers"].items():
            buf = WindowBuffer(0.0)
            buf.data = np.asarray(data)
            env.buffers[int(j)] = buf
        env.rng.bit_generator.state = st["rng"]
    for rng, state in zip(vec.noise_rngs, doc["noise_rngs"]):
        rng.bit_generator.state = state
    vec.obs = None if doc["obs"] is None else np.asarray(doc["obs"])


def load_policy_checkpoint(directory):
    """Deployment loader: (policy, obs normalizer, metadata)."""
    weights, norms, meta = load_weights(os.path.join(directory, "policy.json"))
    if meta.get("kind") != "policy":
        raise ValueError(f"{directory} does not contain a policy checkpoint")
    if meta.get("obs_layout") != OBS_LAYOUT:
        raise ValueError(
            "checkpoint observation layout does not match this build: "
            f"{meta.get('obs_layout')!r}"
        )
    policy = GaussianPolicy(weights, meta["log_std"])
    return policy, norms["obs"], meta
