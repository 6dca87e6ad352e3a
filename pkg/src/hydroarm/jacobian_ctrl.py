"""Resolved-motion rate control baseline.

Task-space velocity commands map to joint rates through a weighted,
damped least-squares Jacobian inverse: a diagonal weight matrix penalizes
joints moving toward their hardware limits, and a damping factor bounds
rates near singularities. A per-joint PID loop converts the commanded
rates to PWM. The PID carries one gain set tuned on the positive
direction only; its degradation on direction reversals against the
asymmetric plant is a deliberate property of the baseline.
"""

from dataclasses import dataclass, field

import numpy as np

from .machine import ACTIVE_JOINTS, DT, active_jacobian, manipulability
from .plant import encode_duty

WEIGHT_CAP = 1e6


class SingularityError(RuntimeError):
    """Raised when the undamped least-squares system is singular."""


@dataclass
class PidGains:
    kp: float = 1.2              # duty per rad/s
    ki: float = 0.8              # duty per rad
    kd: float = 0.02             # duty per rad/s^2
    integral_clamp: float = 1.0  # |integral accumulator| bound [rad]


@dataclass
class JacCtrlConfig:
    gain_K: np.ndarray = None            # 3x3 positive definite; default identity
    damping_k: float = 0.1               # the damping experiment knob
    manipulability_threshold: float = 0.4
    lambda_max: float = 1.0
    weight_gain: float = 0.5             # scale on |dH/dq| in the limit weights
    standard_wls: bool = False           # use J W^-1 Jt instead of J W Jt
    pid: PidGains = field(default_factory=PidGains)

    def __post_init__(self):
        if self.gain_K is None:
            self.gain_K = np.eye(3)
        else:
            self.gain_K = np.asarray(self.gain_K, dtype=float)
            if np.isscalar(self.gain_K) or self.gain_K.ndim == 0:
                self.gain_K = float(self.gain_K) * np.eye(3)
        eigs = np.linalg.eigvalsh(0.5 * (self.gain_K + self.gain_K.T))
        if np.any(eigs <= 0):
            raise ValueError("gain_K must be positive definite")
        if self.damping_k <= 0 or self.lambda_max < 0:
            raise ValueError("need damping_k > 0 and lambda_max >= 0")


def jac_config_from(cfg):
    j = cfg["jacobian"]
    pid = j.get("pid", {})
    return JacCtrlConfig(
        gain_K=j["gain_K"],
        damping_k=j["damping_k"],
        manipulability_threshold=j["manipulability_threshold"],
        lambda_max=j["lambda_max"],
        weight_gain=j["weight_gain"],
        standard_wls=j.get("standard_wls", False),
        pid=PidGains(
            kp=pid.get("kp", 1.2),
            ki=pid.get("ki", 0.8),
            kd=pid.get("kd", 0.02),
            integral_clamp=pid.get("integral_clamp", 1.0),
        ),
    )


def limit_criterion_gradient(q, limits):
    """d/dq of the joint-range criterion H = sum R^2 / (4 (hi-q)(q-lo)).

    Zero mid-range, grows without bound toward either limit.
    """
    q = np.asarray(q, dtype=float)
    lo, hi = limits[:, 0], limits[:, 1]
    span = hi - lo
    num = span**2 * (2.0 * q - hi - lo)
    den = 4.0 * (hi - q) ** 2 * (q - lo) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        grad = np.where(den > 0, num / den, np.inf)
    return grad


class LimitWeighting:
    """Direction-gated joint-limit penalty (diagonal W).

    A joint is penalized only while |dH/dq| is growing, i.e. while it
    moves toward its nearer limit; motion away from the limit is free.
    """

    def __init__(self, weight_gain):
        self.weight_gain = weight_gain
        self.prev_grad_abs = None

    def reset(self):
        self.prev_grad_abs = None

    def weights(self, q_active, limits_active):
        grad_abs = np.abs(limit_criterion_gradient(q_active, limits_active))
        if self.prev_grad_abs is None:
            toward = np.zeros_like(grad_abs, dtype=bool)
        else:
            toward = grad_abs > self.prev_grad_abs
        self.prev_grad_abs = grad_abs
        w = np.where(toward, 1.0 + self.weight_gain * grad_abs, 1.0)
        return np.minimum(w, WEIGHT_CAP)


def damping(J, k, w0, lambda_max):
    """Damping factor: zero away from singularities, ramps linearly with
    manipulability deficit, scales linearly in k."""
    w = manipulability(J)
    if w >= w0:
        return 0.0, w
    return lambda_max * k * (1.0 - w / w0), w


def dls_pinv(J, W=None, lam=0.0, standard_wls=False):
    """Weighted, damped pseudo-inverse J+ = W^-1 Jt (J W Jt + lam^2 I)^-1.

    The middle term follows that formula as printed by default; the
    conventional weighted-least-squares form (J W^-1 Jt) is available via
    standard_wls. Both coincide for W = I, where lam = 0 reproduces the
    Moore-Penrose pseudo-inverse.
    """
    J = np.asarray(J, dtype=float)
    m = J.shape[0]
    w_diag = np.ones(J.shape[1]) if W is None else np.asarray(W, dtype=float)
    if w_diag.ndim == 2:
        w_diag = np.diag(w_diag)
    if np.any(w_diag <= 0):
        raise ValueError("W must be positive")
    inner = (1.0 / w_diag) if standard_wls else w_diag
    M = (J * inner) @ J.T + lam**2 * np.eye(m)
    eigs = np.linalg.eigvalsh(M)
    if eigs[0] <= 1e-12 * max(1.0, eigs[-1]):
        raise SingularityError(
            f"singular least-squares system (min eig {eigs[0]:.3e}); "
            "no damping active"
        )
    return (J.T / w_diag[:, None]) @ np.linalg.inv(M)


def resolved_rate_step(params, q, xdot_goal, velocity_error, cfg, limit_state):
    """Commanded active-joint rates for one tick (the rate-control law).

    Returns (qdot_desired (4,), info) where info carries the damping
    factor and manipulability for logging.
    """
    q = np.asarray(q, dtype=float)
    if not params.in_limits(q):
        raise ValueError("configuration outside joint limits")
    J = active_jacobian(params, q)
    lam, w = damping(J, cfg.damping_k, cfg.manipulability_threshold, cfg.lambda_max)
    active = list(ACTIVE_JOINTS)
    w_diag = limit_state.weights(q[active], params.joint_limits[active])
    J_pinv = dls_pinv(J, w_diag, lam, cfg.standard_wls)
    qdot = J_pinv @ (np.asarray(xdot_goal, dtype=float) + cfg.gain_K @ velocity_error)
    return qdot, {"lambda": lam, "w": w, "weights": w_diag}


@dataclass
class PidState:
    integral: np.ndarray = field(default_factory=lambda: np.zeros(len(ACTIVE_JOINTS)))
    prev_error: np.ndarray = field(default_factory=lambda: np.zeros(len(ACTIVE_JOINTS)))

    def reset(self):
        self.integral[:] = 0.0
        self.prev_error[:] = 0.0


def pid_to_pwm(qdot_desired, qdot_measured, pid_state, gains, duty_cap, dt=DT):
    """Per-joint velocity PID producing a full 5-joint PWM command.

    The integral accumulator is clamped (anti-windup) and the output duty
    saturates at the cap before encoding. The locked q2 always gets zero.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    err = np.asarray(qdot_desired, dtype=float) - np.asarray(qdot_measured, dtype=float)
    pid_state.integral += err * dt
    np.clip(
        pid_state.integral, -gains.integral_clamp, gains.integral_clamp,
        out=pid_state.integral,
    )
    deriv = (err - pid_state.prev_error) / dt
    pid_state.prev_error = err.copy()
    duty = gains.kp * err + gains.ki * pid_state.integral + gains.kd * deriv
    duty = np.clip(duty, -duty_cap, duty_cap)
    u = np.zeros(5, dtype=int)
    for duty_j, j in zip(duty, ACTIVE_JOINTS):
        u[j] = encode_duty(float(duty_j), duty_cap)
    return u


class JacobianController:
    """Stateful resolved-rate + PID controller (one control session)."""

    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg
        self.limit_state = LimitWeighting(cfg.weight_gain)
        self.pid_state = PidState()
        self.prev_goal = np.zeros(3)
        self.prev_v_ee = np.zeros(3)
        self.last_info = {}

    def reset(self, measurement):
        self.limit_state.reset()
        self.pid_state.reset()
        self.prev_goal = np.zeros(3)
        self.prev_v_ee = np.zeros(3)
        self.last_info = {}

    def compute(self, measurement, v_goal):
        """PWM command for the current tick.

        The velocity error fed through the gain matrix is the one left
        over from the previous tick (goal minus measured), initialized to
        zero at session start.
        """
        error = self.prev_goal - self.prev_v_ee
        qdot_des, info = resolved_rate_step(
            self.params, measurement.q, v_goal, error, self.cfg, self.limit_state
        )
        qdot_meas = measurement.qdot[list(ACTIVE_JOINTS)]
        u = pid_to_pwm(
            qdot_des, qdot_meas, self.pid_state, self.cfg.pid, self.params.duty_cap
        )
        self.prev_goal = np.asarray(v_goal, dtype=float).copy()
        self.prev_v_ee = np.asarray(measurement.v_ee, dtype=float).copy()
        self.last_info = info
        return u, {"qd_des": qdot_des, "lam": info["lambda"], "w": info["w"]}
