"""Sensor-stream simulation and the gated multi-modal fusion loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ekf import (DeadReckonTwist, EkfConfig, FeatureDelta, FilterState, FusionFilter, MarkerPose,
                  MeasurementEvent, MetricsReport, PlaneRotation, build_report)
from .features import (FeatureFrame, OdometryParams, delta_to_robot, estimate_motion,
                       make_feature_frame, maybe_insert_keyframe, relocalize)
from .geometry import FramedPose, qconj, qmul, quat_log, twist_exp, twist_log
from .iqa import GateConfig, IqaScore, Modality, score_image, select_modality
from .markers import MarkerRegistry, PanelEstimate, estimate_panel_pose, infer_robot_pose
from .planes import ExtractionParams, extract_planes
from .registration import MatchThresholds, register_planes
from .scene import (PROFILES, DepthProfile, ImageProxy, Scene, detect_markers, render_depth,
                    render_image_proxy)
from .voxel_map import OccupiedIndex, filter_cloud

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# simulated sensor stream
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorConfig:
    twist_sigma_v: float = 0.02      # white velocity noise density, m/s/sqrt(Hz)
    twist_sigma_w: float = 0.005     # rad/s/sqrt(Hz)
    twist_bias_v: float = 0.01       # std of the per-run constant velocity bias, m/s
    twist_bias_w: float = 0.004      # std of the per-run constant gyro bias, rad/s
    marker_sigma_pos: float = 0.02
    marker_sigma_rot: float = 0.01
    feature_noise: float = 0.005
    outlier_rate: float = 0.1


@dataclass(frozen=True)
class SensorFrame:
    index: int
    t: float
    truth: FramedPose
    twist: DeadReckonTwist           # held from t until the next frame
    markers: list
    image: ImageProxy
    features: FeatureFrame
    depth: np.ndarray                # camera-frame cloud (dropouts removed)
    depth_labels: np.ndarray
    free_dirs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # rays with no surface in range


def true_twists(trajectory):
    """Body twists reproducing each ground-truth step exactly under constant-twist integration."""
    out = []
    for (t0, a), (t1, b) in zip(trajectory[:-1], trajectory[1:]):
        rel = a.inverse() @ b.retagged(a.target_frame, "next")
        out.append(twist_log(rel.position, rel.orientation, t1 - t0))
    out.append(out[-1] if out else (np.zeros(3), np.zeros(3)))
    return out


def simulate_stream(scene: Scene, trajectory, cfg: SensorConfig | None = None, seed: int = 0,
                    with_depth: bool = True, profile: DepthProfile | None = None) -> list[SensorFrame]:
    """Per-frame sensor readings along a ground-truth trajectory; pure in its arguments."""
    cfg = cfg or SensorConfig()
    prof = profile or PROFILES["complete_smooth"]
    rng = np.random.default_rng([seed, 71])
    bias_v = cfg.twist_bias_v * rng.standard_normal(3)
    bias_w = cfg.twist_bias_w * rng.standard_normal(3)
    dens = np.diag([cfg.twist_sigma_v ** 2] * 3 + [cfg.twist_sigma_w ** 2] * 3)
    twists = true_twists(trajectory)
    frames = []
    for k, (t, pose) in enumerate(trajectory):
        dt = trajectory[k + 1][0] - t if k + 1 < len(trajectory) else (t - trajectory[k - 1][0] if k else 0.1)
        v, w = twists[k]
        nv = rng.standard_normal(3) * cfg.twist_sigma_v / np.sqrt(dt)
        nw = rng.standard_normal(3) * cfg.twist_sigma_w / np.sqrt(dt)
        twist = DeadReckonTwist(v + bias_v + nv, w + bias_w + nw, dens)
        fseed = seed * 100_003 + k
        markers = detect_markers(scene, pose, cfg.marker_sigma_pos, cfg.marker_sigma_rot, fseed)
        img = render_image_proxy(scene, pose, fseed, timestamp=t)
        ff = make_feature_frame(scene, pose, img, cfg.feature_noise, cfg.outlier_rate, fseed)
        if with_depth:
            dframe = render_depth(scene, pose, prof, fseed)
            ok = np.all(np.isfinite(dframe.points), axis=1)
            depth, labels, free = dframe.points[ok], dframe.labels[ok], dframe.free_dirs
        else:
            depth, labels, free = np.zeros((0, 3)), np.zeros(0, dtype=int), np.zeros((0, 3))
        frames.append(SensorFrame(k, float(t), pose, twist, markers, img, ff, depth, labels, free))
    return frames


def dead_reckon(frames, start: FramedPose):
    """Pose sequence integrating the measured twists from ``start``."""
    pose = start.retagged("odom", "robot")
    out = [pose]
    for a, b in zip(frames[:-1], frames[1:]):
        dp, dq = twist_exp(a.twist.linear, a.twist.angular, b.t - a.t)
        pose = (pose @ FramedPose("robot", "robot", dp, dq)).retagged("odom", "robot")
        out.append(pose)
    return out


def estimate_panel(frames, registry: MarkerRegistry, start: FramedPose, min_samples: int = 10,
                   max_spread: float = 0.1) -> PanelEstimate:
    """Panel pose from the earliest marker sightings, using dead reckoning as robot pose."""
    poses = dead_reckon(frames, start)
    est = None
    for f, p in zip(frames, poses):
        if not f.markers:
            continue
        est = estimate_panel_pose([f.markers], [p], registry, min_samples, max_spread, est)
        if est.fixed:
            return est
    return est if est is not None else PanelEstimate()


# ---------------------------------------------------------------------------
# fusion loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionConfig:
    mode: str = "adaptive"            # adaptive | all
    use_markers: bool = True
    use_vo: bool = True
    gate: GateConfig = field(default_factory=GateConfig)
    ekf: EkfConfig = field(default_factory=EkfConfig)
    odometry: OdometryParams = field(default_factory=OdometryParams)
    extraction: ExtractionParams | None = None
    depth_sigma: float = 0.02         # expected depth noise for default extraction thresholds
    thresholds: MatchThresholds = field(default_factory=MatchThresholds)
    filter_radius: float = 0.15
    plane_floor: float = 1e-6         # rad^2 added to plane rotation variance
    max_plane_rotation: float = 0.5   # rad; larger inter-frame plane rotations are mismatches
    feature_floor: float = 1e-6
    initial_sigma_p: float = 0.01
    initial_sigma_theta: float = 0.01

    def __post_init__(self):
        if self.mode not in ("adaptive", "all"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")


@dataclass
class FusionResult:
    times: np.ndarray
    states: list
    truths: list
    modalities: list
    iqa: list
    choices: list
    marker_frames: np.ndarray
    counts: dict
    filter: FusionFilter

    def report(self, markers_only: bool = False) -> MetricsReport:
        mask = self.marker_frames if markers_only else None
        return build_report(self.times, self.states, self.truths, self.counts, mask, self.filter)

    def trajectory_rows(self) -> list[str]:
        from .ekf import pose_error
        rows = []
        for t, s, g, m in zip(self.times, self.states, self.truths, self.modalities):
            ep, eq = pose_error(s.pose, g.retagged("odom", "robot"))
            vals = list(s.position) + list(s.orientation)
            rows.append(f"{t:.3f}," + ",".join(f"{v:.9f}" for v in vals) + f",{ep:.9f},{eq:.9f},{m}")
        return rows


def _camera_planes(frame: SensorFrame, params: ExtractionParams, index: OccupiedIndex | None,
                   T_oc: FramedPose | None, radius: float):
    cloud = frame.depth
    if index is not None and T_oc is not None and len(cloud):
        _, keep, _ = filter_cloud(index, T_oc.transform_points(cloud), radius)
        cloud = cloud[keep]
    segs, _ = extract_planes(cloud, params)
    return segs


def plane_rotation_measurement(prev_segs, curr_segs, T_rc: FramedPose, t_prev: float, t_curr: float,
                               thresholds: MatchThresholds, floor: float, max_angle: float = np.pi):
    """Robot-frame relative rotation from two frames' plane sets, or None.

    Registrations rotating more than ``max_angle`` along their observable axes
    are dropped: the match tests are rotation invariant, so two similar
    orthogonal planes at a corner can pair crosswise and give a 180 deg answer.
    """
    est, corr = register_planes(prev_segs, curr_segs, thresholds)
    if est is None or est.observable_dof == 0:
        return None
    # per-frame normal variance from each plane's residual spread and extent
    kappa = 0.0
    for c in corr:
        for s in (prev_segs[c.index_a], curr_segs[c.index_b]):
            lam = np.linalg.eigvalsh(s.moments.scatter)
            s_i = s.rms_distance ** 2 * 0.5 * (1.0 / lam[2] + 1.0 / lam[1])
            kappa += 0.5 * c.weight * c.weight * s_i
    C, B = est.tangent_covariance(unit_variance=kappa, null_variance=0.0)
    if np.linalg.norm(B.T @ quat_log(est.q)) > max_angle:
        return None
    R = T_rc.rotation
    q_r = qmul(qmul(T_rc.orientation, est.q), qconj(T_rc.orientation))
    C_r = R @ C @ R.T
    B_r = R @ B
    C_r = C_r + floor * B_r @ B_r.T
    return PlaneRotation(q_r, 0.5 * (C_r + C_r.T), t_prev, t_curr, B_r)


def _feature_delta(motion, T_rc, t_prev, t_curr, floor):
    rel, cov = delta_to_robot(motion, T_rc)
    return FeatureDelta(rel, cov + floor * np.eye(6), t_prev, t_curr)


def run_fusion(frames: list[SensorFrame], registry: MarkerRegistry, panel: PanelEstimate | None,
               cfg: FusionConfig | None = None, index: OccupiedIndex | None = None,
               plane_cache: dict | None = None) -> FusionResult:
    """Replay a sensor stream through the filter.

    Per frame the IQA score picks FeatureVO or PlaneVO ("adaptive"); a failed
    feature track tries keyframe relocalization and otherwise falls back to
    PlaneVO.  Mode "all" applies every modality that produces a measurement.
    Marker poses are never gated.  ``plane_cache`` memoizes segmentations
    when no map filter is used (they then depend only on the frame).
    """
    cfg = cfg or FusionConfig()
    T_rc = registry.T_rc
    params = cfg.extraction or ExtractionParams.for_noise(cfg.depth_sigma)
    P0 = np.diag([cfg.initial_sigma_p ** 2] * 3 + [cfg.initial_sigma_theta ** 2] * 3 + [0.01] * 3)
    flt = FusionFilter(FilterState.initial(frames[0].truth, P0, frames[0].t), cfg.ekf)
    cache = plane_cache if (plane_cache is not None and index is None) else {}
    keyframes = []
    counts = {"frames": 0, "feature": 0, "plane": 0, "plane_invocations": 0, "reloc": 0,
              "marker": 0, "tracking_failures": 0}
    states, truths, times, mods, scores, marker_frames = [], [], [], [], [], []
    choices = []
    marker_ok = cfg.use_markers and panel is not None and panel.fixed
    prev_choice = None

    def planes_for(k: int):
        if k not in cache:
            T_oc = None
            if index is not None:
                T_oc = flt.state.pose.retagged("odom", "robot") @ T_rc if k == len(states) else \
                    states[k].pose @ T_rc
            cache[k] = _camera_planes(frames[k], params, index, T_oc, cfg.filter_radius)
        return cache[k]

    for k, fr in enumerate(frames):
        counts["frames"] += 1
        events = []
        label = "None"
        score: IqaScore = score_image(fr.image, cfg.gate)
        scores.append(score)
        choice = select_modality(score, cfg.gate, prev_choice)
        prev_choice = choice
        choices.append(choice)
        if k > 0:
            flt.advance_to(fr.t)
        if cfg.use_vo and k > 0:
            prev = frames[k - 1]
            want_feature = cfg.mode == "all" or choice is Modality.FEATURE_VO
            want_plane = cfg.mode == "all" or choice is Modality.PLANE_VO
            used = []
            if want_feature:
                motion = estimate_motion(prev.features, fr.features, cfg.odometry)
                if motion:
                    events.append(MeasurementEvent(fr.t, _feature_delta(motion, T_rc, prev.t, fr.t,
                                                                        cfg.feature_floor), "feature"))
                    counts["feature"] += 1
                    used.append("FeatureVO")
                else:
                    counts["tracking_failures"] += 1
                    reloc = relocalize(fr.features, keyframes, cfg.odometry, T_rc)
                    if reloc:
                        events.append(MeasurementEvent(fr.t, MarkerPose(reloc), "reloc"))
                        counts["reloc"] += 1
                        used.append("Reloc")
                    elif cfg.mode == "adaptive":
                        want_plane = True
            if want_plane:
                counts["plane_invocations"] += 1
                meas = plane_rotation_measurement(planes_for(k - 1), planes_for(k), T_rc, prev.t, fr.t,
                                                  cfg.thresholds, cfg.plane_floor, cfg.max_plane_rotation)
                if meas is not None:
                    events.append(MeasurementEvent(fr.t, meas, "plane"))
                    counts["plane"] += 1
                    used.append("PlaneVO")
            label = "+".join(used) if used else "None"
        has_markers = bool(fr.markers)
        marker_frames.append(has_markers)
        if marker_ok and has_markers:
            m = infer_robot_pose(fr.markers, panel, registry)
            events.append(MeasurementEvent(fr.t, MarkerPose(m), "marker"))
            counts["marker"] += 1
        events.append(MeasurementEvent(fr.t, fr.twist, "twist"))
        for ev in events:
            flt.process(ev)
        states.append(flt.state)
        truths.append(fr.truth)
        times.append(fr.t)
        mods.append(label)
        if cfg.use_vo:
            keyframes = maybe_insert_keyframe(fr.features, flt.state.pose, keyframes, cfg.odometry)
    return FusionResult(np.array(times), states, truths, mods, scores, choices, np.array(marker_frames),
                        counts, flt)
