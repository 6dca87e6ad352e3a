"""Experiment harnesses: open-loop plant-vs-model replay and axis-wise
task-space tracking comparison between the learned policy and the
resolved-rate baseline.

Comparative results are expressed as orderings between controllers, never
as absolute targets, since the reference behavior is only published as
plots.
"""

from dataclasses import dataclass, field

import numpy as np

from .actuator import rollout_model
from .controllers import make_controller, run_closed_loop
from .machine import ACTIVE_JOINTS, DT, forward_kinematics
from .plant import decode_command, pwm_command, rest_state, simulate_sequence
from .records import GapMetrics, compute_gap_metrics, record_from_arrays, write_csv

SIM2REAL_START_POSE = np.array([1.5, 0.5, 0.58, 1.71, 1.24])  # rad
SEQUENCE_TICKS = 600  # 30 s at 20 Hz

# Named start configurations for the tracking trials; every record stores
# which one it used.
START_PRESETS = {
    "mid_workspace": np.array([0.3, 0.5, 0.1, 0.5, -0.4]),
    "near_extension": np.array([0.3, 0.5, -0.45, 0.1, 0.05]),
    "low_boom": np.array([0.3, 0.5, -0.45, -0.1, -0.6]),
}


@dataclass
class ControlSequence:
    """Predetermined 30 s PWM sequence for the replay experiment."""

    commands: list                      # 600 arrays of 5 PWM codes
    seed: int
    description: str = ""

    def __len__(self):
        return len(self.commands)

    def duties(self, duty_cap=0.63):
        return np.array([decode_command(u, duty_cap) for u in self.commands])


def _floored_sine(amp_pos, amp_neg, freq, t, floor=0.08, phase=np.pi):
    raw = np.sin(2.0 * np.pi * freq * t + phase)
    amp = amp_pos if raw >= 0 else amp_neg
    mag = floor + (amp - floor) * abs(raw)
    return float(np.sign(raw) * mag) if raw != 0.0 else floor


def make_control_sequence(seed, duty_cap=0.63):
    """Deterministic multi-phase excitation: per-joint sweeps, then
    pairwise, then all-active simultaneous segments.

    Sweeps are floored sine bursts (negative half first, so the tool
    joint moves away from its nearby upper limit at the standard start
    pose); every active joint sees |duty| >= 0.3 somewhere.
    """
    rng = np.random.default_rng(seed)
    duties = np.zeros((SEQUENCE_TICKS, 5))

    def sweep(joint, k0, k1):
        amp_pos = rng.uniform(0.35, 0.55)
        amp_neg = rng.uniform(0.35, 0.55)
        freq = rng.uniform(0.1, 0.3)
        for k in range(k0, k1):
            duties[k, joint] = _floored_sine(amp_pos, amp_neg, freq, (k - k0) * DT)

    k = 0
    for joint in ACTIVE_JOINTS:               # single-joint sweeps
        sweep(joint, k, k + 50)
        k += 50
    for pair in ((0, 3), (2, 4)):             # pairwise
        for joint in pair:
            sweep(joint, k, k + 50)
        k += 50
    while k < SEQUENCE_TICKS:                 # all-active
        block = min(100, SEQUENCE_TICKS - k)
        for joint in ACTIVE_JOINTS:
            sweep(joint, k, k + block)
        k += block

    commands = [pwm_command(d, duty_cap) for d in duties]
    return ControlSequence(
        commands=commands, seed=seed,
        description="single sweeps, pairs, then simultaneous all-active",
    )


def _record_from_rollout(params, q, v, commands, meta):
    """TrackingRecord from a (n+1, 5) joint trajectory (no goal stream)."""
    rows = []
    prev_pos = forward_kinematics(params, q[0]).position
    for k in range(1, len(q)):
        pos = forward_kinematics(params, q[k]).position
        rows.append(
            {
                "t": k * DT,
                "v_goal": np.zeros(3),
                "pos": pos,
                "v_meas": (pos - prev_pos) / DT,
                "q": q[k],
                "qdot": v[k],
                "u": commands[k - 1],
            }
        )
        prev_pos = pos
    return record_from_arrays(rows, meta=meta)


class PlantBackedRollout:
    """Oracle stand-in for the learned models: replays the plant itself,
    so comparing it against the plant must give exactly zero gap."""

    def __init__(self, params):
        self.params = params

    def rollout(self, q0, duty_sequence):
        commands = [pwm_command(d, self.params.duty_cap) for d in duty_sequence]
        traj = simulate_sequence(self.params, rest_state(self.params, q0), commands)
        q = np.array([s.joint.q for s in traj])
        v = np.array([s.joint.qdot for s in traj])
        return q, v


class ModelRollout:
    """Learned-model rollout with the plant's interface."""

    def __init__(self, params, models):
        missing = [j for j in ACTIVE_JOINTS if j not in models]
        if missing:
            raise ValueError(f"missing actuator models for joints {missing}")
        self.params = params
        self.models = models

    def rollout(self, q0, duty_sequence):
        return rollout_model(self.params, self.models, q0, duty_sequence)


def run_sim2real(params, rollout_backend, sequence, start_pose=None):
    """Apply one PWM sequence to the plant and to a rollout backend.

    Returns (plant record, model record, GapMetrics). Passing
    PlantBackedRollout as the backend is the harness self-test and must
    yield all-zero metrics.
    """
    q_start = SIM2REAL_START_POSE if start_pose is None else np.asarray(start_pose)
    if not params.in_limits(q_start):
        raise ValueError("start pose outside joint limits")
    duties = sequence.duties(params.duty_cap)

    traj = simulate_sequence(params, rest_state(params, q_start), sequence.commands)
    q_plant = np.array([s.joint.q for s in traj])
    v_plant = np.array([s.joint.qdot for s in traj])
    rec_plant = _record_from_rollout(
        params, q_plant, v_plant, sequence.commands,
        meta={"system": "plant", "seed": sequence.seed},
    )

    q_model, v_model = rollout_backend.rollout(q_start, duties)
    rec_model = _record_from_rollout(
        params, q_model, v_model, sequence.commands,
        meta={"system": "model", "seed": sequence.seed},
    )
    return rec_plant, rec_model, compute_gap_metrics(rec_plant, rec_model)


AXES = ("x", "y", "z")


def make_axis_profile(axis, speed=0.2, duration=30.0):
    """Trapezoidal single-axis velocity profile with a direction reversal.

    Layout over the duration: pause, ramp to +speed, hold, ramp through
    zero to -speed, hold, ramp back to zero, pause. The negative lobe
    mirrors the positive one, so the commanded displacement integrates to
    zero.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    n = int(round(duration / DT))
    t = np.arange(n) * DT
    eighth = duration / 8.0
    v = np.zeros(n)
    for i, ti in enumerate(t):
        if ti < 0.5 * eighth:
            v[i] = 0.0
        elif ti < 1.5 * eighth:
            v[i] = (ti - 0.5 * eighth) / eighth
        elif ti < 3.5 * eighth:
            v[i] = 1.0
        elif ti < 4.5 * eighth:
            v[i] = 1.0 - 2.0 * (ti - 3.5 * eighth) / eighth
        elif ti < 6.5 * eighth:
            v[i] = -1.0
        elif ti < 7.5 * eighth:
            v[i] = -1.0 + (ti - 6.5 * eighth) / eighth
        else:
            v[i] = 0.0
    profile = np.zeros((n, 3))
    profile[:, AXES.index(axis)] = v * speed
    return profile


@dataclass
class TrackingMetrics:
    controller: str
    axis: str
    preset: str
    rms_vel_error: dict = field(default_factory=dict)       # per axis, m/s
    max_offaxis_drift: float = 0.0                          # m
    peak_joint_accel: float = 0.0                           # rad/s^2
    post_reversal_rms: float = 0.0                          # m/s, commanded axis

    def rows(self):
        base = (self.controller, self.axis, self.preset)
        out = [base + (f"rms_vel_error_{ax}", self.rms_vel_error[ax]) for ax in AXES]
        out.append(base + ("max_offaxis_drift", self.max_offaxis_drift))
        out.append(base + ("peak_joint_accel", self.peak_joint_accel))
        out.append(base + ("post_reversal_rms", self.post_reversal_rms))
        return out


def _reversal_tick(profile, axis_idx):
    v = profile[:, axis_idx]
    sign_change = np.where((v[:-1] > 0) & (v[1:] <= 0))[0]
    return int(sign_change[0] + 1) if len(sign_change) else len(v) // 2


def tracking_metrics(record, profile, controller_id, axis, preset):
    """Metrics for one tracking run.

    Off-axis drift is measured against the profile's analytic integral
    (zero off axis); the jerk proxy is the peak joint acceleration.
    """
    axis_idx = AXES.index(axis)
    diff = record.v_meas - record.v_goal
    rms = {ax: float(np.sqrt(np.mean(diff[:, i] ** 2))) for i, ax in enumerate(AXES)}
    expected = np.cumsum(profile, axis=0) * DT + record.pos[0] - profile[0] * DT
    off_axes = [i for i in range(3) if i != axis_idx]
    drift = np.abs(record.pos[:, off_axes] - expected[:, off_axes])
    accel = np.diff(record.qdot, axis=0) / DT
    rev = _reversal_tick(profile, axis_idx)
    post = diff[rev:, axis_idx]
    return TrackingMetrics(
        controller=controller_id,
        axis=axis,
        preset=preset,
        rms_vel_error=rms,
        max_offaxis_drift=float(drift.max()),
        peak_joint_accel=float(np.abs(accel).max()),
        post_reversal_rms=float(np.sqrt(np.mean(post**2))),
    )


def run_taskspace_eval(
    controller_id, profile, params, preset="mid_workspace", jac_cfg=None,
    policy=None, obs_normalizer=None, axis="x",
):
    """Closed-loop tracking run against the plant; returns (record, metrics)."""
    start_q = START_PRESETS[preset] if isinstance(preset, str) else np.asarray(preset)
    preset_name = preset if isinstance(preset, str) else "custom"
    controller = make_controller(
        controller_id, params, jac_cfg=jac_cfg, policy=policy,
        obs_normalizer=obs_normalizer,
    )
    meta = {"controller": controller_id, "axis": axis, "preset": preset_name}
    record = run_closed_loop(params, controller, start_q, profile, meta=meta)
    metrics = tracking_metrics(record, profile, controller_id, axis, preset_name)
    return record, metrics


COMPARE_HEADER = ["controller", "axis", "preset", "metric", "value"]
GAP_MARKER = "MISSING"


def compare_report(metrics_list, expected=None):
    """Rows for the comparison table, deterministically ordered.

    `expected` names (controller, axis) pairs that must appear; absent
    ones produce an explicit gap row instead of silently vanishing.
    """
    rows = []
    for m in sorted(metrics_list, key=lambda m: (m.controller, m.axis, m.preset)):
        rows.extend(m.rows())
    present = {(m.controller, m.axis) for m in metrics_list}
    for key in sorted(expected or []):
        if tuple(key) not in present:
            rows.append((key[0], key[1], GAP_MARKER, GAP_MARKER, GAP_MARKER))
    return rows


def write_compare_report(path, metrics_list, expected=None):
    rows = compare_report(metrics_list, expected)
    write_csv(path, COMPARE_HEADER, rows)
    return rows


def format_compare_report(rows):
    """Human-readable text table."""
    widths = [max(len(str(r[i])) for r in rows + [COMPARE_HEADER]) for i in range(5)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(COMPARE_HEADER, widths))]
    for r in rows:
        cells = [str(c) if not isinstance(c, float) else f"{c:.6g}" for c in r]
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)
