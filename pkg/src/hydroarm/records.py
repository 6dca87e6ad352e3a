"""Tracking records, gap metrics, and deterministic CSV output.

All experiment outputs flow through here so that identical runs produce
byte-identical files: floats are written with repr (shortest round-trip
form) and no wall-clock data enters any file.
"""

import csv
from dataclasses import dataclass, field

import numpy as np


def _fmt(value):
    if isinstance(value, (np.floating, float)):
        return repr(float(value))
    if isinstance(value, (np.integer, int)):
        return str(int(value))
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


TRACKING_HEADER = (
    ["t", "vx_d", "vy_d", "vz_d", "x", "y", "z", "vx", "vy", "vz"]
    + [f"q{i}" for i in range(1, 6)]
    + [f"qd{i}" for i in range(1, 6)]
    + [f"qd_des{i}" for i in range(1, 5)]
    + [f"u{i}" for i in range(1, 6)]
    + ["lambda", "w"]
)


@dataclass
class TrackingRecord:
    """Uniform 20 Hz time series of one closed-loop or open-loop run."""

    t: np.ndarray          # (n,)
    v_goal: np.ndarray     # (n, 3) commanded task-space velocity [m/s]
    pos: np.ndarray        # (n, 3) measured tip position [m]
    v_meas: np.ndarray     # (n, 3) measured tip velocity [m/s]
    q: np.ndarray          # (n, 5) [rad]
    qdot: np.ndarray       # (n, 5) [rad/s]
    u: np.ndarray          # (n, 5) PWM codes
    qd_des: np.ndarray     # (n, 4) commanded joint rates (nan when not applicable)
    lam: np.ndarray        # (n,) damping factor (nan when not applicable)
    w: np.ndarray          # (n,) manipulability (nan when not applicable)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def rows(self):
        for i in range(len(self.t)):
            yield (
                [self.t[i]]
                + list(self.v_goal[i])
                + list(self.pos[i])
                + list(self.v_meas[i])
                + list(self.q[i])
                + list(self.qdot[i])
                + list(self.qd_des[i])
                + [int(x) for x in self.u[i]]
                + [self.lam[i], self.w[i]]
            )

    def to_csv(self, path):
        write_csv(path, TRACKING_HEADER, self.rows())


def record_from_arrays(rows, meta=None):
    """Assemble a TrackingRecord from a list of per-tick dicts."""
    n = len(rows)
    rec = TrackingRecord(
        t=np.array([r["t"] for r in rows]),
        v_goal=np.array([r["v_goal"] for r in rows]).reshape(n, 3),
        pos=np.array([r["pos"] for r in rows]).reshape(n, 3),
        v_meas=np.array([r["v_meas"] for r in rows]).reshape(n, 3),
        q=np.array([r["q"] for r in rows]).reshape(n, 5),
        qdot=np.array([r["qdot"] for r in rows]).reshape(n, 5),
        u=np.array([r["u"] for r in rows]).reshape(n, 5),
        qd_des=np.array([r.get("qd_des", [np.nan] * 4) for r in rows]).reshape(n, 4),
        lam=np.array([r.get("lam", np.nan) for r in rows]),
        w=np.array([r.get("w", np.nan) for r in rows]),
        meta=dict(meta or {}),
    )
    return rec


@dataclass
class GapMetrics:
    """Per-channel differences between two records of equal length."""

    max_q_diff: np.ndarray       # (5,) [rad]
    rms_q_diff: np.ndarray       # (5,)
    max_qdot_diff: np.ndarray    # (5,) [rad/s]
    rms_qdot_diff: np.ndarray    # (5,)
    max_pos_diff: np.ndarray     # (3,) [m]
    rms_pos_diff: np.ndarray     # (3,)
    max_vel_diff: np.ndarray     # (3,) [m/s]
    rms_vel_diff: np.ndarray     # (3,)
    terminal_eef_offset: float   # [m]

    def all_values(self):
        return np.concatenate(
            [
                self.max_q_diff,
                self.rms_q_diff,
                self.max_qdot_diff,
                self.rms_qdot_diff,
                self.max_pos_diff,
                self.rms_pos_diff,
                self.max_vel_diff,
                self.rms_vel_diff,
                [self.terminal_eef_offset],
            ]
        )

    def rows(self):
        names = []
        values = []
        for group, arr in [
            ("max_q_diff", self.max_q_diff),
            ("rms_q_diff", self.rms_q_diff),
            ("max_qdot_diff", self.max_qdot_diff),
            ("rms_qdot_diff", self.rms_qdot_diff),
        ]:
            for j, v in enumerate(arr):
                names.append(f"{group}_q{j + 1}")
                values.append(v)
        for group, arr in [
            ("max_pos_diff", self.max_pos_diff),
            ("rms_pos_diff", self.rms_pos_diff),
            ("max_vel_diff", self.max_vel_diff),
            ("rms_vel_diff", self.rms_vel_diff),
        ]:
            for axis, v in zip("xyz", arr):
                names.append(f"{group}_{axis}")
                values.append(v)
        names.append("terminal_eef_offset")
        values.append(self.terminal_eef_offset)
        return list(zip(names, values))

    def to_csv(self, path):
        write_csv(path, ["metric", "value"], self.rows())


def _rms(x, axis=0):
    return np.sqrt(np.mean(np.square(x), axis=axis))


def compute_gap_metrics(rec_a, rec_b):
    """Channel-wise gaps between two equally sampled records."""
    if len(rec_a) != len(rec_b):
        raise ValueError("records must have equal length")
    dq = rec_a.q - rec_b.q
    dqd = rec_a.qdot - rec_b.qdot
    dp = rec_a.pos - rec_b.pos
    dv = rec_a.v_meas - rec_b.v_meas
    return GapMetrics(
        max_q_diff=np.max(np.abs(dq), axis=0),
        rms_q_diff=_rms(dq),
        max_qdot_diff=np.max(np.abs(dqd), axis=0),
        rms_qdot_diff=_rms(dqd),
        max_pos_diff=np.max(np.abs(dp), axis=0),
        rms_pos_diff=_rms(dp),
        max_vel_diff=np.max(np.abs(dv), axis=0),
        rms_vel_diff=_rms(dv),
        terminal_eef_offset=float(np.linalg.norm(dp[-1])),
    )
