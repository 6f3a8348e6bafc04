"""Rigid-body poses as translation + unit quaternion.

Conventions used throughout the library:
  * quaternions are scalar-first (w, x, y, z), right-handed, active;
  * every constructor and composition renormalizes, so downstream code can
    rely on |q| = 1 to within 1e-9;
  * fixed-axis roll-pitch-yaw composes as Rz(yaw) @ Ry(pitch) @ Rx(roll).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Pose",
    "quat_multiply",
    "quat_conjugate",
    "quat_normalize",
    "quat_rotate",
    "quat_from_axis_angle",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_from_rpy",
    "quat_angle",
    "quat_to_rotvec",
    "roll_pitch_from_quat",
]

_EPS = 1e-12


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by unit quaternion q. v may be (3,) or (N, 3)."""
    w, x, y, z = q
    u = np.array([x, y, z])
    v = np.asarray(v, dtype=float)
    uv = cross3(u, v)
    uuv = cross3(u, uv)
    return v + 2.0 * (w * uv + uuv)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < _EPS:
        raise ValueError("rotation axis must be non-zero")
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis / n))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the quaternion with non-negative w."""
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_from_rpy(roll: float, pitch: float, yaw: float) -> np.ndarray:
    qx = quat_from_axis_angle((1.0, 0.0, 0.0), roll)
    qy = quat_from_axis_angle((0.0, 1.0, 0.0), pitch)
    qz = quat_from_axis_angle((0.0, 0.0, 1.0), yaw)
    return quat_normalize(quat_multiply(qz, quat_multiply(qy, qx)))


def quat_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two unit quaternions, sign-flip invariant.

    Computed as arccos(2 <a, b>^2 - 1) with the inner product clamped to
    [-1, 1] so floating-point overshoot can never produce NaN.
    """
    d = float(np.clip(np.dot(a, b), -1.0, 1.0))
    return float(np.arccos(np.clip(2.0 * d * d - 1.0, -1.0, 1.0)))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle) of a unit quaternion."""
    w = float(np.clip(q[0], -1.0, 1.0))
    v = np.asarray(q[1:], dtype=float)
    s = np.linalg.norm(v)
    if s < _EPS:
        return 2.0 * v  # first-order expansion near identity
    angle = 2.0 * np.arctan2(s, w)
    if angle > np.pi:
        angle -= 2.0 * np.pi
    return (angle / s) * v


def roll_pitch_from_quat(q: np.ndarray) -> np.ndarray:
    """(roll, pitch) of the Rz(yaw)·Ry(pitch)·Rx(roll) decomposition."""
    m = quat_to_matrix(q)
    pitch = np.arctan2(-m[2, 0], np.hypot(m[0, 0], m[1, 0]))
    if abs(abs(pitch) - np.pi / 2) < 1e-9:
        # gimbal-locked: yaw/roll are coupled; report roll relative to yaw=0
        roll = np.arctan2(-m[1, 2], m[1, 1])
    else:
        roll = np.arctan2(m[2, 1], m[2, 2])
    return np.array([roll, pitch])


# ---------------------------------------------------------------------------
# batched variants (leading batch axes, quaternions in the last axis)


def bquat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product over the last axis without np.cross's axis plumbing."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def bquat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    u = q[..., 1:]
    w = q[..., :1]
    uv = cross3(u, v)
    uuv = cross3(u, uv)
    return v + 2.0 * (w * uv + uuv)


def bquat_from_axis_angle(axis: np.ndarray, angles: np.ndarray) -> np.ndarray:
    half = 0.5 * np.asarray(angles, dtype=float)
    out = np.empty(half.shape + (4,))
    out[..., 0] = np.cos(half)
    out[..., 1:] = np.sin(half)[..., None] * np.asarray(axis, dtype=float)
    return out


def bquat_conjugate(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def bquat_to_rotvec(q: np.ndarray) -> np.ndarray:
    v = q[..., 1:]
    w = q[..., 0]
    s = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(s, w)
    angle = np.where(angle > np.pi, angle - 2.0 * np.pi, angle)
    scale = np.where(s < _EPS, 2.0, angle / np.where(s < _EPS, 1.0, s))
    return scale[..., None] * v


@dataclass(frozen=True)
class Pose:
    """A rigid transform: rotate by `rotation`, then translate."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        q = quat_normalize(np.asarray(self.rotation, dtype=float).reshape(4))
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_translation(x: float, y: float, z: float) -> "Pose":
        return Pose(np.array([x, y, z]))

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(np.asarray(translation, dtype=float), quat_from_axis_angle(axis, angle))

    @staticmethod
    def from_rpy(xyz, rpy) -> "Pose":
        return Pose(np.asarray(xyz, dtype=float), quat_from_rpy(*rpy))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(m[:3, 3].copy(), matrix_to_quat(m[:3, :3]))

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other (apply `other` first in self's frame)."""
        return Pose(
            self.translation + quat_rotate(self.rotation, other.translation),
            quat_multiply(self.rotation, other.rotation),
        )

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.rotation)
        return Pose(-quat_rotate(qi, self.translation), qi)

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        return self.translation + quat_rotate(self.rotation, p)

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return self.translation + quat_rotate(self.rotation, pts)

    def rotate_vector(self, v: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, v)

    def angle_to(self, other: "Pose") -> float:
        return quat_angle(self.rotation, other.rotation)

    def distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def is_close(self, other: "Pose", tol: float = 1e-9) -> bool:
        return self.distance_to(other) <= tol and self.angle_to(other) <= tol

    def __repr__(self) -> str:  # compact, full precision is rarely useful in logs
        t = np.array2string(self.translation, precision=4, suppress_small=True)
        q = np.array2string(self.rotation, precision=4, suppress_small=True)
        return f"Pose(t={t}, q={q})"
