"""Data-driven actuator models: excitation, dataset collection, training,
prediction, and closed-loop rollout.

One MLP per powered joint maps a 0.6 s history of joint position, joint
velocity, and signed duty (13 samples each at 20 Hz, oldest first) to the
joint velocity one tick ahead. Duty enters as the decoded signed value so
the 127/128 PWM wrap does not create an artificial discontinuity.
"""

from dataclasses import dataclass, field

import numpy as np

from .machine import ACTIVE_JOINTS, DT
from .neural import (
    AdamState,
    MlpSpec,
    MlpWeights,
    Normalizer,
    adam_step_mlp,
    init_mlp,
    load_weights,
    mlp_backward,
    mlp_forward,
    save_weights,
)
from .plant import encode_duty, rest_state, step_plant

WINDOW_TICKS = 13          # 0.6 s at 20 Hz, both endpoints included
WINDOW_DIM = 3 * WINDOW_TICKS

EXCITE, RETURN, REST = "excite", "return", "rest"

ACTUATOR_SPEC = MlpSpec((WINDOW_DIM, 32, 32, 1), "relu", "sigmoid")


@dataclass
class ActuatorWindow:
    """13-sample history of one joint, oldest first."""

    q: np.ndarray
    qdot: np.ndarray
    duty: np.ndarray

    def __post_init__(self):
        for name in ("q", "qdot", "duty"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (WINDOW_TICKS,):
                raise ValueError(f"{name} history must have {WINDOW_TICKS} samples")
            setattr(self, name, arr)

    def vector(self):
        return np.concatenate([self.q, self.qdot, self.duty])


class WindowBuffer:
    """Rolling per-joint history feeding the actuator model."""

    def __init__(self, q0, v0=0.0, duty0=0.0):
        self.data = np.zeros((WINDOW_TICKS, 3))
        self.data[:, 0] = q0
        self.data[:, 1] = v0
        self.data[:, 2] = duty0

    def push(self, q, v, duty):
        self.data[:-1] = self.data[1:]
        self.data[-1] = (q, v, duty)

    def vector(self):
        return np.concatenate([self.data[:, 0], self.data[:, 1], self.data[:, 2]])


@dataclass(frozen=True)
class ExcitationConfig:
    """Sine excitation for data collection."""

    freq_range: tuple = (0.05, 0.5)      # Hz
    amp_range: tuple = (0.15, 0.63)      # duty
    dead_zone_floor: float = 0.08        # duty; must clear the valve dead zone
    duty_cap: float = 0.63
    return_duty: float = 0.35            # |duty| used to drive back home
    rest_dwell_s: float = 1.5            # settle time at zero duty between segments
    # Gravity makes every joint net-drift toward its lower limit under a
    # sine, so the excited joint starts high to sweep its whole range.
    excite_home_fraction: float = 0.85

    def __post_init__(self):
        if self.dead_zone_floor < 0.07:
            raise ValueError("dead_zone_floor must be >= 0.07 (valve dead zone)")
        if not (self.dead_zone_floor < self.amp_range[1] <= self.duty_cap <= 0.63 + 1e-12):
            raise ValueError("amplitudes must lie in (dead_zone_floor, duty_cap <= 0.63]")


def excitation_config_from(cfg):
    e = cfg["excitation"]
    return ExcitationConfig(
        freq_range=tuple(e["freq_range"]),
        amp_range=tuple(e["amp_range"]),
        dead_zone_floor=e["dead_zone_floor"],
        duty_cap=e["duty_cap"],
        return_duty=e["return_duty"],
        rest_dwell_s=e.get("rest_dwell_s", 1.5),
    )


def _sine_duty(cfg, amp_pos, amp_neg, freq, phase, t):
    """Signed duty whose magnitude stays above the dead-zone floor.

    The two half-waves carry independently drawn amplitudes; unequal draws
    make a segment net-drift one way or the other, so over many segments
    the joint random-walks across its whole range instead of sinking
    toward the gravity-assisted limit.
    """
    raw = np.sin(2.0 * np.pi * freq * t + phase)
    amp = amp_pos if raw >= 0.0 else amp_neg
    mag = cfg.dead_zone_floor + (amp - cfg.dead_zone_floor) * abs(raw)
    return float(np.sign(raw) * mag) if raw != 0.0 else cfg.dead_zone_floor


@dataclass
class JointDataset:
    """Raw per-tick log for one joint: the CSV-facing collection product."""

    joint: int
    t: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    duty: np.ndarray
    tag: list

    def __len__(self):
        return len(self.t)

    def windows(self):
        """Training matrix X (n, 39) and targets y (n,) from non-RETURN ticks.

        A sample ends at tick k with target qdot[k+1]; every tick in
        k-12..k+1 must be EXCITE or REST so no window crosses a RETURN
        boundary. The rest dwells give the model dense coverage of the
        idle state the controllers start from.
        """
        X, y = [], []
        usable = np.array([tag != RETURN for tag in self.tag])
        for k in range(WINDOW_TICKS - 1, len(self.t) - 1):
            lo = k - WINDOW_TICKS + 1
            if not usable[lo : k + 2].all():
                continue
            X.append(
                np.concatenate(
                    [self.q[lo : k + 1], self.qdot[lo : k + 1], self.duty[lo : k + 1]]
                )
            )
            y.append(self.qdot[k + 1])
        if not X:
            return np.zeros((0, WINDOW_DIM)), np.zeros(0)
        return np.asarray(X), np.asarray(y)

    def to_csv(self, path):
        from .records import write_csv

        rows = [
            [self.t[i], self.q[i], self.qdot[i], self.duty[i], self.tag[i]]
            for i in range(len(self.t))
        ]
        write_csv(path, ["t", "q", "qdot", "duty", "tag"], rows)


def generate_excitation(params, cfg, joint, state0, n_ticks, rng):
    """Excite one joint with randomized sine segments, returning home after
    each limit hit.

    Returns the duty/tag streams together with the plant log (q, qdot per
    tick) produced while generating them. Other joints receive zero duty.
    RETURN-tagged ticks cover the drive back to the start configuration.
    """
    state = state0.copy()
    home_q = state0.joint.q[joint]
    lo, hi = params.joint_limits[joint]
    dwell_ticks = max(1, int(round(cfg.rest_dwell_s / DT)))

    mode = REST
    dwell_left = dwell_ticks
    seg_t = 0.0
    amp_pos = amp_neg = freq = phase = 0.0

    t = np.zeros(n_ticks)
    qs = np.zeros(n_ticks)
    vs = np.zeros(n_ticks)
    duties = np.zeros(n_ticks)
    tags = []

    for k in range(n_ticks):
        if mode == REST:
            if dwell_left > 0:
                s = 0.0
                dwell_left -= 1
            else:
                mode = EXCITE
                seg_t = 0.0
                amp_pos = rng.uniform(*cfg.amp_range)
                amp_neg = rng.uniform(*cfg.amp_range)
                freq = rng.uniform(*cfg.freq_range)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                s = _sine_duty(cfg, amp_pos, amp_neg, freq, phase, seg_t)
        elif mode == EXCITE:
            s = _sine_duty(cfg, amp_pos, amp_neg, freq, phase, seg_t)
        else:  # RETURN
            err = home_q - state.joint.q[joint]
            if abs(err) < 0.02:
                mode = REST
                dwell_left = dwell_ticks - 1
                s = 0.0
            else:
                s = float(np.sign(err)) * cfg.return_duty

        t[k] = state.time
        qs[k] = state.joint.q[joint]
        vs[k] = state.joint.qdot[joint]
        duties[k] = s
        tags.append(mode)

        u = np.zeros(5, dtype=int)
        u[joint] = encode_duty(s, cfg.duty_cap)
        state = step_plant(params, state, u)
        seg_t += DT

        if mode == EXCITE and (state.joint.q[joint] <= lo or state.joint.q[joint] >= hi):
            mode = RETURN

    return JointDataset(joint, t, qs, vs, duties, tags), state


def collect_dataset(params, cfg, duration_s, rng, joints=ACTIVE_JOINTS, home_q=None):
    """Per-joint datasets, exciting one joint at a time from a safe pose."""
    if duration_s < 2.0:
        raise ValueError("need at least 2 s per joint (window warm-up)")
    if home_q is None:
        home_q = params.joint_limits.mean(axis=1)
        home_q[1] = params.q2_fixed_angle
    n_ticks = int(round(duration_s / DT))
    datasets = {}
    for joint in joints:
        start_q = np.asarray(home_q, dtype=float).copy()
        lo, hi = params.joint_limits[joint]
        start_q[joint] = lo + cfg.excite_home_fraction * (hi - lo)
        state0 = rest_state(params, start_q)
        joint_rng = np.random.default_rng(rng.integers(0, 2**63 - 1))
        datasets[joint], _ = generate_excitation(
            params, cfg, joint, state0, n_ticks, joint_rng
        )
    return datasets


@dataclass
class ActuatorModel:
    """Trained one-joint velocity predictor with its normalization."""

    joint: int
    weights: MlpWeights
    in_norm: Normalizer
    out_norm: Normalizer
    out_lo: float      # sigmoid output affinely mapped onto [out_lo, out_hi]
    out_hi: float      # in normalized-target space

    def _denorm(self, sig):
        yn = self.out_lo + (self.out_hi - self.out_lo) * sig
        return self.out_norm.denormalize(yn.reshape(-1, 1))[:, 0]

    def predict_batch(self, X):
        Xn = self.in_norm.normalize(X)
        sig, _ = mlp_forward(self.weights, Xn)
        return self._denorm(sig[:, 0])

    def predict(self, window):
        vec = window.vector() if isinstance(window, (ActuatorWindow, WindowBuffer)) else window
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (WINDOW_DIM,):
            raise ValueError(f"window vector must have {WINDOW_DIM} entries")
        return float(self.predict_batch(vec[None, :])[0])

    def save(self, path):
        save_weights(
            path,
            self.weights,
            normalizers={"input": self.in_norm, "output": self.out_norm},
            metadata={
                "kind": "actuator",
                "joint": self.joint,
                "out_lo": self.out_lo,
                "out_hi": self.out_hi,
                "window_ticks": WINDOW_TICKS,
            },
        )

    @classmethod
    def load(cls, path):
        weights, norms, meta = load_weights(path)
        if meta.get("kind") != "actuator":
            raise ValueError(f"{path} is not an actuator model file")
        return cls(
            joint=int(meta["joint"]),
            weights=weights,
            in_norm=norms["input"],
            out_norm=norms["output"],
            out_lo=float(meta["out_lo"]),
            out_hi=float(meta["out_hi"]),
        )


def predict_next_velocity(model, window):
    """Next-tick joint velocity [rad/s] for a 13-sample window."""
    return model.predict(window)


@dataclass
class TrainResult:
    model: ActuatorModel
    train_losses: list = field(default_factory=list)   # normalized-space MSE per epoch
    holdout_rmse: list = field(default_factory=list)   # denormalized rad/s per epoch


def train_actuator_model(
    dataset,
    epochs=60,
    batch_size=256,
    learning_rate=1e-3,
    holdout_fraction=0.1,
    input_noise_q=0.05,
    input_noise_qdot=0.05,
    seed=0,
):
    """Fit the 39-32-32-1 model on one joint's dataset.

    Inputs and targets are normalized; the sigmoid output is affinely
    rescaled onto the normalized target range (with margin) so predictions
    stay bounded. 10% of samples are held out and scored each epoch.

    Gaussian noise on the q/qdot input streams regularizes the model off
    the data manifold: in closed-loop rollouts the window carries the
    model's own predictions, and a model fit only to exact logged windows
    amplifies its own drift until the rollout diverges.
    """
    X, y = dataset.windows()
    if len(X) < 1000:
        raise ValueError(f"dataset too small: {len(X)} samples (need >= 1000)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(X))
    n_hold = max(1, int(len(X) * holdout_fraction))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]

    in_norm = Normalizer.for_dim(WINDOW_DIM)
    in_norm.update(X[train_idx])
    out_norm = Normalizer.for_dim(1)
    out_norm.update(y[train_idx, None])

    yn = out_norm.normalize(y[:, None])[:, 0]
    span = yn[train_idx].max() - yn[train_idx].min()
    out_lo = float(yn[train_idx].min() - 0.05 * span)
    out_hi = float(yn[train_idx].max() + 0.05 * span)

    weights = init_mlp(ACTUATOR_SPEC, rng)
    adam = AdamState(learning_rate=learning_rate)
    model = ActuatorModel(dataset.joint, weights, in_norm, out_norm, out_lo, out_hi)
    noise_scale = np.concatenate(
        [
            np.full(WINDOW_TICKS, input_noise_q),
            np.full(WINDOW_TICKS, input_noise_qdot),
            np.zeros(WINDOW_TICKS),
        ]
    )

    train_losses, holdout_rmse = [], []
    for epoch in range(epochs):
        # Step-decay schedule: late epochs at low rate polish out the
        # prediction bias that otherwise accumulates over long rollouts.
        if epoch == int(epochs * 0.6) or epoch == int(epochs * 0.85):
            adam.learning_rate *= 0.3
        order = rng.permutation(train_idx)
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            xb = X[idx] + rng.normal(size=(len(idx), WINDOW_DIM)) * noise_scale
            xb = in_norm.normalize(xb)
            tb = yn[idx]
            sig, cache = mlp_forward(weights, xb)
            pred = out_lo + (out_hi - out_lo) * sig[:, 0]
            diff = pred - tb
            loss = float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite training loss")
            grad_sig = (2.0 * diff / len(diff) * (out_hi - out_lo))[:, None]
            grads, _ = mlp_backward(weights, cache, grad_sig)
            adam_step_mlp(weights, grads, adam)
            epoch_loss += loss * len(idx)
        train_losses.append(epoch_loss / len(order))
        pred_hold = model.predict_batch(X[hold_idx])
        holdout_rmse.append(float(np.sqrt(np.mean((pred_hold - y[hold_idx]) ** 2))))
    return TrainResult(model, train_losses, holdout_rmse)


def rollout_model(params, models, q0, duty_sequence, dt=DT):
    """Closed-loop self-feeding rollout of the learned actuator models.

    duty_sequence is (n, 5) signed duty; joints without a model (the locked
    q2, or any joint omitted from `models`) hold still. Predicted velocity
    both integrates the joint angle and re-enters the next window. Joint
    limits clamp exactly like the plant.
    """
    duty_sequence = np.asarray(duty_sequence, dtype=float)
    n = len(duty_sequence)
    q = np.zeros((n + 1, 5))
    v = np.zeros((n + 1, 5))
    q[0] = params.clamp_q(np.asarray(q0, dtype=float))
    buffers = {j: WindowBuffer(q[0, j]) for j in models}
    lo, hi = params.joint_limits[:, 0], params.joint_limits[:, 1]

    for k in range(n):
        q[k + 1] = q[k]
        for j, model in models.items():
            buffers[j].push(q[k, j], v[k, j], duty_sequence[k, j])
            v_next = model.predict(buffers[j])
            q_next = q[k, j] + v_next * dt
            if q_next <= lo[j]:
                q_next = lo[j]
                if v_next < 0:
                    v_next = 0.0
            elif q_next >= hi[j]:
                q_next = hi[j]
                if v_next > 0:
                    v_next = 0.0
            q[k + 1, j] = q_next
            v[k + 1, j] = v_next
    return q, v
