"""Kinematics of a 5-revolute-joint hydraulic manipulator.

Joint layout: q1 yaws the whole arm about the vertical base axis; q2..q5
form a planar pitch chain in the vertical plane through the arm. q2 is a
real joint but is mechanically locked (reach adjustment only), so control
uses q1, q3, q4, q5. Angles are radians, lengths meters, positive pitch
raises the link.
"""

from dataclasses import dataclass, field

import numpy as np

# Joints actually driven by the controllers (0-based indices; q2 locked).
ACTIVE_JOINTS = (0, 2, 3, 4)

DT = 0.05  # control period, s (20 Hz)


@dataclass(frozen=True)
class CylinderGeometry:
    """Crank geometry linking cylinder stroke to joint rotation.

    a is the pivot-to-cylinder-base distance, b the pivot-to-rod-attachment
    distance, phi the offset between joint angle and crank opening angle.
    The crank angle q + phi must stay inside (0, pi) over the joint's limit
    range, otherwise the lever arm collapses to zero inside the workspace.
    """

    a: float
    b: float
    phi: float

    def lever_arm(self, q):
        """Perpendicular pivot-to-cylinder-axis distance at joint angle q [m]."""
        theta = np.asarray(q, dtype=float) + self.phi
        c = np.sqrt(self.a**2 + self.b**2 - 2.0 * self.a * self.b * np.cos(theta))
        return self.a * self.b * np.sin(theta) / c


@dataclass
class MachineParams:
    """Geometric and actuation description of the manipulator."""

    base_height: float
    link_lengths: np.ndarray        # (3,) boom, arm, tool [m]
    q2_fixed_angle: float           # locked reach joint pose [rad]
    joint_limits: np.ndarray        # (5, 2) min/max [rad]
    cylinders: tuple                # 5 CylinderGeometry
    direction_gains: np.ndarray     # (5, 2) cylinder speed at full duty, (pos, neg) [m/s]
    dead_zone: float                # duty fraction producing no flow
    duty_cap: float                 # safety cap on |duty|
    tau_rest: float                 # lag time constant from rest [s]
    tau_move: float                 # lag time constant while moving [s]
    rest_speed_threshold: float = 0.02  # |qdot| below which tau_rest applies [rad/s]

    def __post_init__(self):
        self.link_lengths = np.asarray(self.link_lengths, dtype=float)
        self.joint_limits = np.asarray(self.joint_limits, dtype=float)
        self.direction_gains = np.asarray(self.direction_gains, dtype=float)
        if self.link_lengths.shape != (3,) or np.any(self.link_lengths <= 0):
            raise ValueError("link_lengths must be 3 positive values")
        if self.joint_limits.shape != (5, 2) or np.any(
            self.joint_limits[:, 0] >= self.joint_limits[:, 1]
        ):
            raise ValueError("joint_limits must be 5 (min, max) pairs with min < max")
        if not (0.0 <= self.dead_zone < self.duty_cap <= 1.0):
            raise ValueError("need 0 <= dead_zone < duty_cap <= 1")
        if np.any(self.direction_gains <= 0):
            raise ValueError("direction gains must be positive")
        if not (self.tau_rest > self.tau_move > 0.0):
            raise ValueError("need tau_rest > tau_move > 0")
        for j, (geom, (lo, hi)) in enumerate(zip(self.cylinders, self.joint_limits)):
            r = geom.lever_arm(np.linspace(lo, hi, 2001))
            if np.any(r <= 1e-6):
                raise ValueError(f"joint {j + 1}: crank singularity inside limit range")

    def clamp_q(self, q):
        return np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])

    def in_limits(self, q):
        return bool(
            np.all(q >= self.joint_limits[:, 0]) and np.all(q <= self.joint_limits[:, 1])
        )


@dataclass
class JointState:
    """Joint positions and velocities (rad, rad/s)."""

    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).copy()
        self.qdot = np.asarray(self.qdot, dtype=float).copy()

    def copy(self):
        return JointState(self.q.copy(), self.qdot.copy())


@dataclass
class EefState:
    """End-effector position (m), tool heading (rad), velocity (m/s)."""

    position: np.ndarray
    heading: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _pitch_elevations(params, q):
    """Cumulative elevation of boom, arm, tool segments above horizontal."""
    e1 = q[1] + q[2]
    e2 = e1 + q[3]
    e3 = e2 + q[4]
    return np.array([e1, e2, e3])


def chain_points(params, q):
    """Positions of the shoulder, boom end, arm end, tool tip, shape (4, 3)."""
    q = np.asarray(q, dtype=float)
    elev = _pitch_elevations(params, q)
    lengths = params.link_lengths
    reach = np.concatenate([[0.0], np.cumsum(lengths * np.cos(elev))])
    height = params.base_height + np.concatenate([[0.0], np.cumsum(lengths * np.sin(elev))])
    cy, sy = np.cos(q[0]), np.sin(q[0])
    return np.stack([reach * cy, reach * sy, height], axis=1)


def forward_kinematics(params, q):
    """Tool-tip position and heading for joint angles q (total on finite q)."""
    pts = chain_points(params, q)
    elev = _pitch_elevations(params, q)
    return EefState(position=pts[-1], heading=float(elev[2]))


def jacobian(params, q):
    """Analytic 3x5 Jacobian of tip position w.r.t. all five joints.

    The q2 column is computed like any other joint; downstream control
    excludes it (see active_jacobian).
    """
    q = np.asarray(q, dtype=float)
    elev = _pitch_elevations(params, q)
    lengths = params.link_lengths
    rho = float(np.sum(lengths * np.cos(elev)))
    cy, sy = np.cos(q[0]), np.sin(q[0])

    # d(rho)/dq_j and dz/dq_j for the pitch joints: joint j rotates every
    # segment from its own index onward.
    sin_terms = lengths * np.sin(elev)
    cos_terms = lengths * np.cos(elev)
    drho = np.array(
        [
            -np.sum(sin_terms),            # q2
            -np.sum(sin_terms),            # q3
            -np.sum(sin_terms[1:]),        # q4
            -sin_terms[2],                 # q5
        ]
    )
    dz = np.array(
        [
            np.sum(cos_terms),
            np.sum(cos_terms),
            np.sum(cos_terms[1:]),
            cos_terms[2],
        ]
    )

    J = np.zeros((3, 5))
    J[0, 0] = -rho * sy
    J[1, 0] = rho * cy
    J[2, 0] = 0.0
    J[0, 1:] = drho * cy
    J[1, 1:] = drho * sy
    J[2, 1:] = dz
    return J


def active_jacobian(params, q):
    """3x4 Jacobian over the controlled joints q1, q3, q4, q5."""
    return jacobian(params, q)[:, list(ACTIVE_JOINTS)]


def manipulability(J):
    """Scalar singularity-proximity measure w = sqrt(det(J Jt)) >= 0."""
    gram = J @ J.T
    det = np.linalg.det(gram)
    return float(np.sqrt(max(det, 0.0)))


def eef_from_joint_state(params, joint):
    """EefState with velocity J(q) qdot derived from a JointState."""
    eef = forward_kinematics(params, joint.q)
    eef.velocity = jacobian(params, joint.q) @ joint.qdot
    return eef


def calibrate_direction_gains(geom, limits, target_pos, target_neg, dead_zone, duty_cap):
    """Cylinder-speed gains so the joint-speed extrema over the limit range
    hit the target magnitudes at capped duty.

    The extremum of |omega| = |nu| / r(q) lands where the lever arm is
    smallest, so gains scale with min r over the range.
    """
    r_min = float(np.min(geom.lever_arm(np.linspace(limits[0], limits[1], 20001))))
    scale = r_min * (1.0 - dead_zone) / (duty_cap - dead_zone)
    return target_pos * scale, target_neg * scale
