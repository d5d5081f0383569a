"""Panel pose from marker detections and robot pose inference once the panel is fixed."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (FramedPose, PoseWithCovariance, chain, qconj, qmul, quat_to_euler,
                       slerp_mean)
from .registration import NoDataError


class RegistryError(KeyError):
    pass


class PanelStateError(RuntimeError):
    pass


class MarkerRegistry:
    """Marker poses in the panel frame plus the camera mounting on the robot."""

    def __init__(self, markers: dict, camera_extrinsics: FramedPose):
        self._markers = {int(k): v.retagged("panel", f"marker{int(k)}") for k, v in markers.items()}
        self._inverse = {k: v.inverse() for k, v in self._markers.items()}
        self.T_rc = camera_extrinsics.retagged("robot", "camera")
        self.T_cr = self.T_rc.inverse()

    @classmethod
    def from_scene(cls, scene) -> "MarkerRegistry":
        return cls({m.marker_id: m.pose for m in scene.markers}, scene.camera_extrinsics)

    def marker(self, marker_id: int) -> FramedPose:
        try:
            return self._markers[int(marker_id)]
        except KeyError:
            raise RegistryError(f"unknown marker id {marker_id}") from None

    def marker_inverse(self, marker_id: int) -> FramedPose:
        self.marker(marker_id)
        return self._inverse[int(marker_id)]

    def ids(self):
        return sorted(self._markers)

    def dumps(self) -> str:
        doc = {"camera_extrinsics": list(self.T_rc.as_tuple()),
               "markers": [{"id": k, "pose": list(v.as_tuple())} for k, v in sorted(self._markers.items())]}
        return json.dumps(doc, indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "MarkerRegistry":
        doc = json.loads(text)
        ext = doc["camera_extrinsics"]
        markers = {int(r["id"]): FramedPose("panel", "marker", r["pose"][:3], r["pose"][3:])
                   for r in doc["markers"]}
        return cls(markers, FramedPose("robot", "camera", ext[:3], ext[3:]))

    @classmethod
    def load(cls, path) -> "MarkerRegistry":
        return cls.loads(Path(path).read_text())


@dataclass
class PanelEstimate:
    pose: FramedPose | None = None
    sample_count: int = 0
    fixed: bool = False
    spread: float = np.inf
    samples: list = field(default_factory=list, repr=False)


def _mean_pose(poses, target: str, source: str) -> FramedPose:
    pos = np.mean([p.position for p in poses], axis=0)
    q = slerp_mean([p.orientation for p in poses])
    return FramedPose(target, source, pos, q)


def panel_samples(observations, robot_poses, registry: MarkerRegistry):
    """One ``T^O_P`` per marker observation: ``T^O_R T^R_C T^C_M T^M_P``."""
    out = []
    for frame, T_or in zip(observations, robot_poses):
        T_or = T_or.retagged("odom", "robot")
        for marker_id, T_cm in frame:
            T_mp = registry.marker_inverse(marker_id)
            T_cm = T_cm.retagged("camera", T_mp.target_frame)
            out.append(chain(T_or, registry.T_rc, T_cm, T_mp))
    return out


def estimate_panel_pose(observations, robot_poses, registry: MarkerRegistry,
                        min_samples: int = 10, max_spread: float = 0.1,
                        previous: PanelEstimate | None = None) -> PanelEstimate:
    """Average panel pose from marker observations over one or more frames.

    ``observations`` is a list over frames of ``(marker_id, T^C_M)`` lists and
    ``robot_poses`` the matching odometry poses.  Samples accumulate onto
    ``previous``; the estimate is fixed once enough samples agree within
    ``max_spread`` metres (RMS distance to the mean position).
    """
    samples = list(previous.samples) if previous is not None else []
    if previous is not None and previous.fixed:
        return previous
    samples.extend(panel_samples(observations, robot_poses, registry))
    if not samples:
        raise NoDataError("no marker observations to estimate the panel pose")
    pose = _mean_pose(samples, "odom", "panel")
    pos = np.array([s.position for s in samples])
    spread = float(np.sqrt(np.mean(np.sum((pos - pose.position) ** 2, axis=1))))
    fixed = len(samples) >= min_samples and spread < max_spread
    return PanelEstimate(pose, len(samples), fixed, spread, samples)


def infer_robot_pose(detections, panel: PanelEstimate, registry: MarkerRegistry,
                     floor_pos: float = 1e-4, floor_rot: float = 1e-4) -> PoseWithCovariance:
    """Robot pose ``T^O_R = T^O_P T^P_M T^M_C T^C_R`` averaged over one frame's detections.

    The diagonal covariance holds per-axis sample variances of position and of
    roll/pitch/yaw deviations from the mean, plus a floor; a single
    detection reports the floor alone.
    """
    if not panel.fixed:
        raise PanelStateError("panel pose is not fixed yet")
    if not detections:
        raise NoDataError("no marker detections in frame")
    poses = []
    for marker_id, T_cm in detections:
        T_pm = registry.marker(marker_id)
        T_mc = T_cm.retagged("camera", T_pm.source_frame).inverse()
        poses.append(chain(panel.pose, T_pm, T_mc, registry.T_cr).retagged("odom", "robot"))
    mean = _mean_pose(poses, "odom", "robot")
    var = np.zeros(6)
    if len(poses) >= 2:
        pos = np.array([p.position for p in poses])
        var[:3] = pos.var(axis=0, ddof=1)
        dev = np.array([quat_to_euler(qmul(qconj(mean.orientation), p.orientation)) for p in poses])
        var[3:] = np.mean(dev ** 2, axis=0) * len(poses) / (len(poses) - 1)
    var[:3] += floor_pos
    var[3:] += floor_rot
    return PoseWithCovariance(mean, np.diag(var))
