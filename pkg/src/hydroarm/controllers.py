"""Closed-loop sessions binding a controller to the synthetic plant.

Both the experiment harnesses and the teleoperation service drive this
same stepping code, so a scripted run and a live session fed identical
commands produce identical trajectories.

Controllers see only what a real encoder-only installation measures:
joint positions/velocities and a finite-difference end-effector velocity.
"""

from dataclasses import dataclass

import numpy as np

from .actuator import WindowBuffer
from .env import OBS_DIM
from .jacobian_ctrl import JacobianController
from .machine import ACTIVE_JOINTS, DT, forward_kinematics
from .plant import decode_pwm, encode_duty, rest_state, step_plant
from .records import record_from_arrays

CONTROLLER_IDS = ("rl_policy", "jacobian", "raw_joint")


@dataclass
class Measurement:
    """Per-tick sensor view handed to controllers."""

    q: np.ndarray       # (5,) rad
    qdot: np.ndarray    # (5,) rad/s
    pos: np.ndarray     # (3,) m
    v_ee: np.ndarray    # (3,) m/s, finite-differenced


class RlPolicyController:
    """Deployed policy: frozen observation normalizer, deterministic
    actions, windows built from live measurements."""

    def __init__(self, params, policy, obs_normalizer):
        self.params = params
        self.policy = policy
        self.normalizer = obs_normalizer
        self.buffers = None
        self.last_duty = np.zeros(len(ACTIVE_JOINTS))

    def reset(self, measurement):
        self.buffers = {j: WindowBuffer(measurement.q[j]) for j in ACTIVE_JOINTS}
        self.last_duty = np.zeros(len(ACTIVE_JOINTS))

    def compute(self, measurement, v_goal):
        parts = [measurement.v_ee, np.asarray(v_goal, dtype=float)]
        for j in ACTIVE_JOINTS:
            parts.append(self.buffers[j].vector())
        obs = np.concatenate(parts)
        if obs.shape != (OBS_DIM,):
            raise ValueError(f"observation must have {OBS_DIM} entries")
        action = self.policy.act(
            self.normalizer.normalize(obs)[None, :], deterministic=True
        )[0][0]
        u = np.zeros(5, dtype=int)
        duties = np.zeros(len(ACTIVE_JOINTS))
        for i, (a, j) in enumerate(zip(action, ACTIVE_JOINTS)):
            code = encode_duty(float(a) * self.params.duty_cap, self.params.duty_cap)
            u[j] = code
            duties[i] = decode_pwm(code, self.params.duty_cap)
            self.buffers[j].push(measurement.q[j], measurement.qdot[j], duties[i])
        self.last_duty = duties
        return u, {}


class RawJointController:
    """Teleoperation pass-through: commanded per-joint duties to PWM."""

    def __init__(self, params):
        self.params = params
        self.duties = np.zeros(5)

    def reset(self, measurement):
        self.duties = np.zeros(5)

    def set_duties(self, duties):
        self.duties = np.clip(
            np.asarray(duties, dtype=float), -self.params.duty_cap, self.params.duty_cap
        )
        self.duties[1] = 0.0  # q2 locked

    def compute(self, measurement, v_goal):
        u = np.zeros(5, dtype=int)
        for j in range(5):
            u[j] = encode_duty(float(self.duties[j]), self.params.duty_cap)
        return u, {}


def make_controller(controller_id, params, jac_cfg=None, policy=None, obs_normalizer=None):
    if controller_id == "jacobian":
        if jac_cfg is None:
            raise ValueError("jacobian controller needs a JacCtrlConfig")
        return JacobianController(params, jac_cfg)
    if controller_id == "rl_policy":
        if policy is None or obs_normalizer is None:
            raise ValueError("rl_policy controller needs a policy checkpoint")
        return RlPolicyController(params, policy, obs_normalizer)
    if controller_id == "raw_joint":
        return RawJointController(params)
    raise ValueError(f"unknown controller {controller_id!r} (want one of {CONTROLLER_IDS})")


class ClosedLoopSession:
    """One controller driving the plant at 20 Hz, one tick at a time."""

    def __init__(self, params, controller, start_q):
        self.params = params
        self.controller = controller
        self.plant_state = rest_state(params, start_q)
        self.prev_pos = forward_kinematics(params, self.plant_state.joint.q).position
        self.v_ee = np.zeros(3)
        controller.reset(self.measurement())

    def measurement(self):
        joint = self.plant_state.joint
        return Measurement(
            q=joint.q.copy(),
            qdot=joint.qdot.copy(),
            pos=self.prev_pos.copy(),
            v_ee=self.v_ee.copy(),
        )

    def step(self, v_goal):
        """One control cycle; returns the telemetry row for this tick."""
        meas = self.measurement()
        u, info = self.controller.compute(meas, v_goal)
        self.plant_state = step_plant(self.params, self.plant_state, u)
        new_pos = forward_kinematics(self.params, self.plant_state.joint.q).position
        self.v_ee = (new_pos - self.prev_pos) / DT
        self.prev_pos = new_pos
        row = {
            "t": self.plant_state.time,
            "v_goal": np.asarray(v_goal, dtype=float),
            "pos": new_pos,
            "v_meas": self.v_ee.copy(),
            "q": self.plant_state.joint.q.copy(),
            "qdot": self.plant_state.joint.qdot.copy(),
            "u": u,
        }
        if "qd_des" in info:
            row["qd_des"] = info["qd_des"]
            row["lam"] = info["lam"]
            row["w"] = info["w"]
        return row


def run_closed_loop(params, controller, start_q, profile, meta=None):
    """Drive a velocity profile (n, 3) through a fresh session."""
    profile = np.atleast_2d(np.asarray(profile, dtype=float))
    session = ClosedLoopSession(params, controller, start_q)
    rows = [session.step(v_goal) for v_goal in profile]
    return record_from_arrays(rows, meta=meta)
