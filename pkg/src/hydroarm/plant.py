"""Synthetic hydraulic plant standing in for the real machine.

Reproduces the measured valve behaviors: 8-bit PWM encoding with two
half-ranges, a ~7% dead zone, direction-dependent cylinder speed, crank
lever-arm modulation of joint speed, and a state-dependent first-order
response lag (slow from rest, fast once moving). Joints are dynamically
decoupled; q2 is locked.
"""

from dataclasses import dataclass

import numpy as np

from .machine import DT, JointState, forward_kinematics

DUTY_CAP = 0.63  # |duty| safety cap enforced on decode/encode


def decode_pwm(u, cap=DUTY_CAP):
    """Signed duty from an 8-bit PWM code.

    [0, 127] drives the positive direction (s = u/127), [255, 128] the
    negative direction (s = -(255-u)/127); both 0 and 255 decode to rest.
    Magnitudes beyond the cap clamp to it.
    """
    u = int(u)
    if not 0 <= u <= 255:
        raise ValueError(f"PWM code {u} outside [0, 255]")
    s = u / 127.0 if u <= 127 else -(255 - u) / 127.0
    return float(np.clip(s, -cap, cap))


def encode_duty(s, cap=DUTY_CAP):
    """8-bit PWM code for a signed duty; inverse of decode_pwm up to 1/127."""
    if not np.isfinite(s) or abs(s) > 1.0:
        raise ValueError(f"duty {s} outside [-1, 1]")
    s = float(np.clip(s, -cap, cap))
    if s >= 0.0:
        return int(round(s * 127.0))
    return 255 - int(round(-s * 127.0))


def pwm_command(duties, cap=DUTY_CAP):
    """Encode 5 signed duties into a PWM command vector (dtype int)."""
    duties = np.asarray(duties, dtype=float)
    if duties.shape != (5,):
        raise ValueError("need 5 duties")
    return np.array([encode_duty(s, cap) for s in duties], dtype=int)


def decode_command(u, cap=DUTY_CAP):
    """Decode a 5-element PWM command into signed duties."""
    u = np.asarray(u)
    if u.shape != (5,):
        raise ValueError("need 5 PWM codes")
    return np.array([decode_pwm(int(v), cap) for v in u])


@dataclass
class PlantState:
    """Ground-truth machine state. joint.qdot doubles as the lag state."""

    joint: JointState
    time: float = 0.0

    @property
    def filtered_qdot(self):
        return self.joint.qdot

    def copy(self):
        return PlantState(self.joint.copy(), self.time)


def rest_state(params, q):
    """PlantState at rest at configuration q (clamped into limits)."""
    q = params.clamp_q(np.asarray(q, dtype=float))
    return PlantState(JointState(q, np.zeros(5)), 0.0)


def steady_velocity(params, joint_index, s, q_i):
    """Steady joint speed for signed duty s at joint angle q_i [rad/s].

    Zero inside the dead zone; outside it the cylinder speed scales the
    remaining duty range by the direction gain, and the crank lever arm
    converts cylinder speed to joint speed.
    """
    if abs(s) > 1.0:
        raise ValueError(f"duty {s} outside [-1, 1]")
    if abs(s) <= params.dead_zone:
        return 0.0
    g_pos, g_neg = params.direction_gains[joint_index]
    gain = g_pos if s > 0 else g_neg
    nu = gain * (abs(s) - params.dead_zone) / (1.0 - params.dead_zone)
    r = float(params.cylinders[joint_index].lever_arm(q_i))
    return float(np.sign(s) * nu / r)


def step_plant(params, state, u, dt=DT):
    """Advance the plant one tick under PWM command u.

    Each joint independently relaxes toward its steady speed with a
    first-order lag whose time constant depends on whether the joint is
    already moving. Joint limits clamp position and zero the blocked
    velocity component; q2 never moves.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    duties = decode_command(u, params.duty_cap)
    q = state.joint.q.copy()
    v = state.joint.qdot.copy()
    lo, hi = params.joint_limits[:, 0], params.joint_limits[:, 1]

    for j in range(5):
        if j == 1:
            v[j] = 0.0  # reach joint locked
            continue
        omega_ss = steady_velocity(params, j, duties[j], q[j])
        tau = params.tau_rest if abs(v[j]) < params.rest_speed_threshold else params.tau_move
        v[j] += (dt / tau) * (omega_ss - v[j])
        q[j] += v[j] * dt
        if q[j] <= lo[j]:
            q[j] = lo[j]
            if v[j] < 0:
                v[j] = 0.0
        elif q[j] >= hi[j]:
            q[j] = hi[j]
            if v[j] > 0:
                v[j] = 0.0
    return PlantState(JointState(q, v), state.time + dt)


def simulate_sequence(params, state0, commands, dt=DT):
    """Deterministic rollout; returns the trajectory including state0."""
    commands = list(commands)
    if len(commands) == 0:
        return [state0.copy()]
    traj = [state0.copy()]
    state = state0
    for u in commands:
        state = step_plant(params, state, u, dt)
        traj.append(state)
    return traj


def trajectory_rows(params, traj, commands):
    """CSV rows `t, q1..q5, qd1..qd5, u1..u5, x, y, z` for a rollout."""
    rows = []
    padded = list(commands) + [np.zeros(5, dtype=int)]
    for state, u in zip(traj, padded):
        eef = forward_kinematics(params, state.joint.q)
        rows.append(
            [state.time]
            + [float(x) for x in state.joint.q]
            + [float(x) for x in state.joint.qdot]
            + [int(x) for x in u]
            + [float(x) for x in eef.position]
        )
    return rows


TRAJECTORY_HEADER = (
    ["t"]
    + [f"q{i}" for i in range(1, 6)]
    + [f"qd{i}" for i in range(1, 6)]
    + [f"u{i}" for i in range(1, 6)]
    + ["x", "y", "z"]
)


def write_trajectory_csv(path, params, traj, commands):
    from .records import write_csv

    write_csv(path, TRAJECTORY_HEADER, trajectory_rows(params, traj, commands))
