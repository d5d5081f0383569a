"""Feature-tracking odometry surrogate: landmark frames, robust motion, keyframes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (FramedPose, PoseWithCovariance, chain, euler_rate_to_body, geodesic_distance,
                       quat_to_euler, skew)
from .registration import davenport_quaternions, estimate_rotation


@dataclass(frozen=True)
class FeatureFrame:
    timestamp: float
    ids: np.ndarray     # (N,) landmark ids, unique
    points: np.ndarray  # (N, 3) camera frame
    source_quality: int = 0

    def __post_init__(self):
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("landmark ids must be unique within a frame")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Keyframe:
    frame: FeatureFrame
    pose: FramedPose  # filter estimate (odom <- robot) at insertion


@dataclass(frozen=True)
class OdometryParams:
    inlier_threshold: float = 0.03
    ransac_iterations: int = 100
    min_matches: int = 6
    min_inliers: int = 4
    seed: int = 0
    keyframe_distance: float = 0.5
    keyframe_angle: float = np.radians(15.0)
    keyframe_min_landmarks: int = 20
    max_keyframes: int = 100
    reloc_floor: float = 1e-3


@dataclass(frozen=True)
class MotionEstimate:
    """Pose of the current camera in the previous camera frame, tangent covariance (t, theta)."""

    delta: FramedPose
    covariance: np.ndarray
    inliers: int
    matches: int


@dataclass(frozen=True)
class TrackingFailure:
    reason: str
    matches: int = 0

    def __bool__(self) -> bool:
        return False


# ---------------------------------------------------------------------------
# frame synthesis
# ---------------------------------------------------------------------------

def landmark_normals(scene) -> np.ndarray:
    owner = scene.landmark_side
    pts = scene.landmarks
    normals = np.zeros_like(pts)
    for k, s in enumerate(scene.sides):
        normals[owner == k] = s.normal
    centers = scene.corner_centers()
    for j in range(4):
        sel = owner == 4 + j
        rel = pts[sel, :2] - centers[j]
        normals[sel, :2] = rel / np.linalg.norm(rel, axis=1, keepdims=True)
    return normals


def visible_landmarks(scene, pose_gt: FramedPose):
    """Ids and camera-frame coordinates of landmarks in view and facing the camera."""
    from .scene import camera_pose

    T_cp = camera_pose(scene, pose_gt).inverse() @ scene.panel_pose_gt
    T_pc = T_cp.inverse()
    pc = T_cp.transform_points(scene.landmarks)
    to_cam = T_pc.position - scene.landmarks
    facing = np.einsum("ij,ij->i", landmark_normals(scene), to_cam) > 0
    cam = scene.camera
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fx * pc[:, 1] / z + cam.cy
    ok = facing & (z > 0.05) & (z < cam.max_range) & (u >= 0) & (u <= cam.width - 1) \
        & (v >= 0) & (v <= cam.height - 1)
    ids = np.flatnonzero(ok)
    return ids, pc[ids]


def make_feature_frame(scene, pose_gt: FramedPose, image_proxy, noise_sigma: float = 0.0,
                       outlier_rate: float = 0.0, seed: int = 0, cap: int = 200) -> FeatureFrame:
    if not 0.0 <= outlier_rate <= 1.0:
        raise ValueError("outlier_rate must be in [0, 1]")
    rng = np.random.default_rng([seed, 53])
    ids, pts = visible_landmarks(scene, pose_gt)
    n = min(len(ids), int(image_proxy.trackable_feature_count), cap)
    pick = np.sort(rng.choice(len(ids), size=n, replace=False)) if n < len(ids) else np.arange(len(ids))
    ids, pts = ids[pick].copy(), pts[pick].copy()
    if noise_sigma > 0:
        pts = pts + noise_sigma * rng.standard_normal(pts.shape)
    n_out = int(round(outlier_rate * len(ids)))
    if n_out >= 2:
        sel = np.sort(rng.choice(len(ids), size=n_out, replace=False))
        ids[sel] = np.roll(ids[sel], 1)
    return FeatureFrame(float(image_proxy.timestamp), ids, pts, int(image_proxy.trackable_feature_count))


# ---------------------------------------------------------------------------
# motion estimation
# ---------------------------------------------------------------------------

def quat_to_matrix_batch(q) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=1),
    ], axis=1)


def _rigid_fit(prev_pts, curr_pts):
    """R, t minimizing sum |R c + t - p|^2 via the Davenport solver on centered points."""
    cp = prev_pts.mean(axis=0)
    cc = curr_pts.mean(axis=0)
    est = estimate_rotation(prev_pts - cp, curr_pts - cc, np.ones(len(prev_pts)))
    R = FramedPose("a", "b", np.zeros(3), est.q).rotation
    return R, cp - R @ cc, est.q


def match_frames(prev: FeatureFrame, curr: FeatureFrame):
    common, ip, ic = np.intersect1d(prev.ids, curr.ids, assume_unique=True, return_indices=True)
    return prev.points[ip], curr.points[ic]


def estimate_motion(prev: FeatureFrame, curr: FeatureFrame, params: OdometryParams | None = None):
    """Robust rigid registration of matched landmarks.

    Returns a :class:`MotionEstimate` (``delta`` maps current-camera
    coordinates into the previous camera frame) or a :class:`TrackingFailure`.
    """
    params = params or OdometryParams()
    P, C = match_frames(prev, curr)
    m = len(P)
    if m < params.min_matches:
        return TrackingFailure("insufficient matches", m)
    rng = np.random.default_rng([params.seed, m])
    tau2 = params.inlier_threshold ** 2
    S = np.argsort(rng.random((params.ransac_iterations, m)), axis=1)[:, :3]
    Ps, Cs = P[S], C[S]
    area = np.linalg.norm(np.cross(Cs[:, 1] - Cs[:, 0], Cs[:, 2] - Cs[:, 0]), axis=1)
    ok = area >= 1e-6
    best = None
    if ok.any():
        Ps, Cs = Ps[ok], Cs[ok]
        cp, cc = Ps.mean(axis=1), Cs.mean(axis=1)
        q = davenport_quaternions(Ps - cp[:, None], Cs - cc[:, None], np.ones(Ps.shape[:2]))
        R = quat_to_matrix_batch(q)
        t = cp - np.einsum("kij,kj->ki", R, cc)
        r2 = np.sum((np.einsum("kij,nj->kni", R, C) + t[:, None] - P) ** 2, axis=2)
        inl = r2 < tau2
        counts = inl.sum(axis=1)
        cost = np.sum(np.minimum(r2, tau2), axis=1)
        # most inliers, then lowest truncated cost, then first drawn
        k = np.lexsort((np.arange(len(counts)), cost, -counts))[0]
        best = (int(counts[k]), inl[k])
    if best is None or best[0] < params.min_inliers:
        return TrackingFailure("insufficient inliers", m)
    inl = best[1]
    for _ in range(3):
        R, t, q = _rigid_fit(P[inl], C[inl])
        r2 = np.sum((C @ R.T + t - P) ** 2, axis=1)
        new = r2 < tau2
        if new.sum() < params.min_inliers or np.array_equal(new, inl):
            break
        inl = new
    R, t, q = _rigid_fit(P[inl], C[inl])
    n = int(inl.sum())
    res = C[inl] @ R.T + t - P[inl]
    dof = max(3 * n - 6, 1)
    sigma2 = max(float(np.sum(res ** 2)) / dof, 1e-8)
    # residual r = R c + t - p; right-perturbed Jacobian rows [I, -R [c]x]
    J = np.zeros((n, 3, 6))
    J[:, :, :3] = np.eye(3)
    J[:, :, 3:] = -np.einsum("ij,njk->nik", R, np.array([skew(c) for c in C[inl]]))
    J = J.reshape(3 * n, 6)
    cov = sigma2 * np.linalg.inv(J.T @ J)
    return MotionEstimate(FramedPose("camera_prev", "camera", t, q), 0.5 * (cov + cov.T), n, m)


def delta_to_robot(motion: MotionEstimate, T_rc: FramedPose):
    """Express a camera-frame motion as robot motion ``T_rc delta T_cr`` with its covariance.

    Covariances use (translation in the previous frame, rotation in the current body frame).
    """
    T_rc = T_rc.retagged("robot", "camera")
    d = motion.delta
    Tc = FramedPose("camera", "camera", d.position, d.orientation)
    Tr = chain(T_rc, Tc, T_rc.inverse())
    R = T_rc.rotation
    M = np.zeros((6, 6))
    M[:3, :3] = R
    M[:3, 3:] = R @ Tc.rotation @ skew(R.T @ T_rc.position)
    M[3:, 3:] = R
    cov = M @ motion.covariance @ M.T
    return Tr.retagged("robot_prev", "robot"), 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# keyframes and relocalization
# ---------------------------------------------------------------------------

def _tangent_cov_to_euler(pose: FramedPose, cov_body):
    """Body (t, theta) covariance to odom-position / roll-pitch-yaw ordering."""
    R = pose.rotation
    E = np.linalg.inv(euler_rate_to_body(quat_to_euler(pose.orientation)))
    M = np.zeros((6, 6))
    M[:3, :3] = R
    M[3:, 3:] = E
    out = M @ cov_body @ M.T
    return 0.5 * (out + out.T)


def relocalize(curr: FeatureFrame, keyframes, params: OdometryParams | None = None,
               T_rc: FramedPose | None = None):
    """Absolute robot pose from the keyframe sharing most landmarks, or a failure."""
    params = params or OdometryParams()
    if not keyframes:
        return TrackingFailure("no keyframes")
    shared = [len(np.intersect1d(kf.frame.ids, curr.ids, assume_unique=True)) for kf in keyframes]
    best = int(np.argmax(shared))
    if shared[best] < params.min_matches:
        return TrackingFailure("no keyframe shares enough landmarks", shared[best])
    kf = keyframes[best]
    motion = estimate_motion(kf.frame, curr, params)
    if not motion:
        return motion
    if T_rc is None:
        T_rc = FramedPose.identity("robot", "camera")
    rel, cov = delta_to_robot(motion, T_rc)
    pose = (kf.pose.retagged("odom", "robot_prev") @ rel).retagged("odom", "robot")
    cov = cov + params.reloc_floor * np.eye(6)
    return PoseWithCovariance(pose, _tangent_cov_to_euler(pose, cov))


def maybe_insert_keyframe(curr: FeatureFrame, pose_estimate: FramedPose, keyframes,
                          params: OdometryParams | None = None) -> list:
    """New list with ``curr`` appended when it is far enough from every stored keyframe."""
    params = params or OdometryParams()
    kfs = list(keyframes)
    if len(curr) < params.keyframe_min_landmarks:
        return kfs
    for kf in kfs:
        close = np.linalg.norm(kf.pose.position - pose_estimate.position) <= params.keyframe_distance
        aligned = geodesic_distance(kf.pose.orientation, pose_estimate.orientation) <= params.keyframe_angle
        if close and aligned:
            return kfs
    kfs.append(Keyframe(curr, pose_estimate))
    while len(kfs) > params.max_keyframes:
        kfs.pop(0)
    return kfs
