"""Frame-tagged rigid transforms and quaternion helpers.

Quaternions are Hamilton, scalar-first ``(w, x, y, z)`` and describe active
rotations.  Euler angles are roll-pitch-yaw with ``R = Rz(yaw) Ry(pitch) Rx(roll)``.
Covariance blocks follow the order ``x, y, z, roll, pitch, yaw``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


class FrameChainError(ValueError):
    """Raised when two transforms are chained across mismatched frames."""

    def __init__(self, left_source: str, right_target: str):
        super().__init__(
            f"cannot chain transforms: left source frame '{left_source}' "
            f"!= right target frame '{right_target}'"
        )
        self.left_source = left_source
        self.right_target = right_target


# ---------------------------------------------------------------------------
# quaternion algebra
# ---------------------------------------------------------------------------

def qnormalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("quaternion has zero or non-finite norm")
    return q / n


def qmul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def qconj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def qcanonical(q):
    """Return the representative with non-negative scalar part."""
    q = np.asarray(q, dtype=float)
    return -q if q[0] < 0 else q.copy()


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Shepperd's method; result has non-negative scalar part."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    cands = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    i = int(np.argmax(cands))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return qcanonical(qnormalize(q))


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


def quat_exp(rotvec):
    """Unit quaternion for a rotation vector (axis * angle)."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec)
    if theta < 1e-12:
        return qnormalize(np.concatenate([[1.0], 0.5 * rotvec]))
    return np.concatenate([[np.cos(0.5 * theta)], np.sin(0.5 * theta) * rotvec / theta])


def quat_log(q):
    """Rotation vector of ``q`` using the short-way representative."""
    q = qcanonical(q)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v
    return 2.0 * np.arctan2(s, q[0]) * v / s


def rotate(q, v):
    return quat_to_matrix(q) @ np.asarray(v, dtype=float)


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _left_jacobian(phi):
    """SO(3) left Jacobian ``V`` so that exp of the twist (v, phi) translates by ``V v``."""
    th = np.linalg.norm(phi)
    K = skew(phi)
    if th < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (np.eye(3) + (1 - np.cos(th)) / th ** 2 * K
            + (th - np.sin(th)) / th ** 3 * K @ K)


def twist_exp(v, w, dt: float):
    """Body-frame displacement (dp, dq) of a constant twist held for ``dt``."""
    phi = np.asarray(w, dtype=float) * dt
    dp = _left_jacobian(phi) @ (np.asarray(v, dtype=float) * dt)
    return dp, quat_exp(phi)


def twist_log(dp, dq, dt: float):
    """Constant body twist (v, w) that moves by (dp, dq) in ``dt``; inverse of :func:`twist_exp`."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    phi = quat_log(dq)
    v = np.linalg.solve(_left_jacobian(phi), np.asarray(dp, dtype=float))
    return v / dt, phi / dt


def quat_to_euler(q):
    """Roll, pitch, yaw for ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""
    R = quat_to_matrix(q)
    pitch = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def euler_to_quat(roll, pitch, yaw):
    qx = quat_from_axis_angle([1, 0, 0], roll)
    qy = quat_from_axis_angle([0, 1, 0], pitch)
    qz = quat_from_axis_angle([0, 0, 1], yaw)
    return qmul(qz, qmul(qy, qx))


def euler_rate_to_body(euler):
    """Matrix mapping small roll/pitch/yaw increments to body-frame rotation vector."""
    roll, pitch, _ = euler
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    return np.array([
        [1.0, 0.0, -sp],
        [0.0, cr, sr * cp],
        [0.0, -sr, cr * cp],
    ])


def tangent_basis(q):
    """4x3 matrix whose columns are q ⊗ (0, e_i); orthonormal, spans the tangent at q."""
    return np.column_stack([qmul(q, np.concatenate([[0.0], e])) for e in np.eye(3)])


# ---------------------------------------------------------------------------
# slerp and averaging
# ---------------------------------------------------------------------------

def slerp(q0, q1, t: float):
    q0 = qnormalize(q0)
    q1 = qnormalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-13:
        return qnormalize(q0 + t * (q1 - q0))
    omega = np.arccos(min(dot, 1.0))
    so = np.sin(omega)
    return np.sin((1.0 - t) * omega) / so * q0 + np.sin(t * omega) / so * q1


def slerp_mean(orientations: Sequence, weights: Sequence[float] | None = None):
    """Weighted quaternion mean by incremental slerp.

    The running mean is ``m_k = slerp(m_{k-1}, q_k, w_k / sum(w_1..w_k))``.
    Each input is sign-aligned with the running mean first, so negating any
    input does not change the result.
    """
    qs = [np.asarray(q, dtype=float) for q in orientations]
    if not qs:
        raise ValueError("slerp_mean needs at least one quaternion")
    if weights is None:
        weights = [1.0] * len(qs)
    weights = [float(w) for w in weights]
    if len(weights) != len(qs):
        raise ValueError("weights and orientations differ in length")
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        raise ValueError("weights must be non-negative with positive sum")

    mean = None
    total = 0.0
    for q, w in zip(qs, weights):
        q = qnormalize(q)
        if mean is None:
            if w == 0:
                continue
            mean = qcanonical(q)
            total = w
            continue
        if w == 0:
            continue
        if np.dot(mean, q) < 0:
            q = -q
        total += w
        mean = qnormalize(slerp(mean, q, w / total))
    return qcanonical(mean)


def geodesic_distance(q1, q2) -> float:
    """Minimal rotation angle between two orientations, in [0, pi].

    Equal to ``2 arccos|<q1, q2>|``; evaluated through atan2 of the relative
    rotation so that small angles keep full precision.
    """
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    # vector part of q1^-1 q2, written so that identical inputs cancel exactly
    vec = q1[0] * q2[1:] - q2[0] * q1[1:] - np.cross(q1[1:], q2[1:])
    return 2.0 * float(np.arctan2(np.linalg.norm(vec), abs(q1 @ q2)))


# ---------------------------------------------------------------------------
# framed poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FramedPose:
    """Pose of ``source_frame`` expressed in ``target_frame`` (maps source coords to target)."""

    target_frame: str
    source_frame: str
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: IDENTITY_Q.copy())

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        q = qnormalize(np.array(self.orientation, dtype=float).reshape(4))
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    @classmethod
    def identity(cls, target_frame: str, source_frame: str | None = None) -> "FramedPose":
        return cls(target_frame, source_frame or target_frame)

    @classmethod
    def from_matrix(cls, target_frame: str, source_frame: str, T) -> "FramedPose":
        T = np.asarray(T, dtype=float)
        return cls(target_frame, source_frame, T[:3, 3], matrix_to_quat(T[:3, :3]))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T

    def inverse(self) -> "FramedPose":
        qi = qconj(self.orientation)
        return FramedPose(self.source_frame, self.target_frame, -rotate(qi, self.position), qi)

    def transform_points(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation.T + self.position

    def __matmul__(self, other: "FramedPose") -> "FramedPose":
        return compose(self, other)

    def retagged(self, target_frame: str, source_frame: str) -> "FramedPose":
        return FramedPose(target_frame, source_frame, self.position, self.orientation)

    def as_tuple(self) -> tuple:
        """(x, y, z, qw, qx, qy, qz)."""
        return tuple(float(v) for v in np.concatenate([self.position, self.orientation]))


def compose(a: FramedPose, b: FramedPose) -> FramedPose:
    """Chain ``a`` (target <- mid) with ``b`` (mid <- source)."""
    if a.source_frame != b.target_frame:
        raise FrameChainError(a.source_frame, b.target_frame)
    q = qnormalize(qmul(a.orientation, b.orientation))
    p = a.position + rotate(a.orientation, b.position)
    return FramedPose(a.target_frame, b.source_frame, p, q)


def chain(*poses: FramedPose) -> FramedPose:
    out = poses[0]
    for p in poses[1:]:
        out = compose(out, p)
    return out


@dataclass(frozen=True)
class PoseWithCovariance:
    pose: FramedPose
    covariance: np.ndarray

    def __post_init__(self):
        C = np.array(self.covariance, dtype=float).reshape(6, 6)
        if not np.allclose(C, C.T, atol=1e-9):
            raise ValueError("pose covariance is not symmetric")
        if np.linalg.eigvalsh(0.5 * (C + C.T)).min() < -1e-9:
            raise ValueError("pose covariance is not positive semi-definite")
        C.setflags(write=False)
        object.__setattr__(self, "covariance", C)
