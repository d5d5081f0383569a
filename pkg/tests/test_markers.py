import numpy as np
import pytest

from panelnav.geometry import FramedPose, geodesic_distance
from panelnav.markers import (MarkerRegistry, PanelEstimate, PanelStateError, RegistryError, estimate_panel_pose,
                              infer_robot_pose)
from panelnav.registration import NoDataError
from panelnav.scene import build_panel_scene, detect_markers, generate_trajectory


@pytest.fixture(scope="module")
def world():
    scene = build_panel_scene(3)
    traj = generate_trajectory(scene)
    return scene, traj, MarkerRegistry.from_scene(scene)


def _visible(world, k=None):
    """Pose and noiseless detections at frame ``k``, or at the first frame seeing two markers."""
    scene, traj, _ = world
    if k is None:
        k = next(i for i, (_, p) in enumerate(traj) if len(detect_markers(scene, p)) >= 2)
    pose = traj[k][1]
    return pose, detect_markers(scene, pose)


def _close(a: FramedPose, b: FramedPose, tol):
    assert np.linalg.norm(a.position - b.position) < tol
    assert geodesic_distance(a.orientation, b.orientation) < max(tol, 1e-7)


def test_single_noiseless_observation_gives_panel(world):
    scene, _, reg = world
    pose, det = _visible(world)
    assert len(det) >= 2
    est = estimate_panel_pose([det[:1]], [pose], reg, min_samples=1)
    _close(est.pose, scene.panel_pose_gt, 1e-12)
    assert est.fixed and est.sample_count == 1


def test_identical_observations_zero_spread(world):
    scene, _, reg = world
    pose, det = _visible(world)
    est = estimate_panel_pose([det[:1]] * 12, [pose] * 12, reg)
    assert est.spread == pytest.approx(0.0, abs=1e-12)
    assert est.fixed and est.sample_count == 12
    _close(est.pose, scene.panel_pose_gt, 1e-12)


def test_symmetric_perturbations_cancel(world):
    scene, _, reg = world
    pose, det = _visible(world)
    mid, T = det[0]
    eps = np.array([0.01, -0.02, 0.005])
    plus = FramedPose(T.target_frame, T.source_frame, T.position + eps, T.orientation)
    minus = FramedPose(T.target_frame, T.source_frame, T.position - eps, T.orientation)
    est = estimate_panel_pose([[(mid, plus)], [(mid, minus)]], [pose, pose], reg, min_samples=2)
    np.testing.assert_allclose(est.pose.position, scene.panel_pose_gt.position, atol=1e-12)


def test_fixing_needs_samples_and_agreement(world):
    _, _, reg = world
    pose, det = _visible(world)
    est = estimate_panel_pose([det[:1]] * 3, [pose] * 3, reg)
    assert not est.fixed
    est = estimate_panel_pose([det[:1]] * 7, [pose] * 7, reg, previous=est)
    assert est.fixed and est.sample_count == 10
    again = estimate_panel_pose([det[:1]], [pose], reg, previous=est)
    assert again is est


def test_estimate_errors(world):
    _, _, reg = world
    pose, det = _visible(world)
    with pytest.raises(RegistryError):
        estimate_panel_pose([[(999, det[0][1])]], [pose], reg)
    with pytest.raises(NoDataError):
        estimate_panel_pose([[]], [pose], reg)


def test_infer_noiseless_and_cross_marker_consistency(world):
    scene, _, reg = world
    pose, det = _visible(world)
    panel = PanelEstimate(scene.panel_pose_gt, 10, True, 0.0)
    for d in det:
        got = infer_robot_pose([d], panel, reg)
        _close(got.pose, pose, 1e-12)
        np.testing.assert_allclose(np.diag(got.covariance), [1e-4] * 6)


def test_infer_identical_detections_floor_only(world):
    scene, _, reg = world
    pose, det = _visible(world)
    panel = PanelEstimate(scene.panel_pose_gt, 10, True, 0.0)
    got = infer_robot_pose([det[0]] * 4, panel, reg, floor_pos=1e-4, floor_rot=2e-4)
    np.testing.assert_allclose(np.diag(got.covariance), [1e-4] * 3 + [2e-4] * 3, atol=1e-15)
    _close(got.pose, pose, 1e-12)


def test_infer_errors(world):
    scene, _, reg = world
    pose, det = _visible(world)
    with pytest.raises(PanelStateError):
        infer_robot_pose(det, PanelEstimate(scene.panel_pose_gt, 3, False), reg)
    fixed = PanelEstimate(scene.panel_pose_gt, 10, True, 0.0)
    with pytest.raises(RegistryError):
        infer_robot_pose([(999, det[0][1])], fixed, reg)
    with pytest.raises(NoDataError):
        infer_robot_pose([], fixed, reg)


def test_round_trip_panel_from_inferred_poses(world):
    scene, traj, reg = world
    panel = PanelEstimate(scene.panel_pose_gt, 10, True, 0.0)
    obs, poses = [], []
    for k in range(0, 60, 5):
        pose, det = _visible(world, k)
        if det:
            obs.append(det)
            poses.append(infer_robot_pose(det, panel, reg).pose)
    est = estimate_panel_pose(obs, poses, reg, min_samples=1)
    _close(est.pose, scene.panel_pose_gt, 1e-9)


def test_covariance_grows_with_noise(world):
    scene, traj, reg = world
    panel = PanelEstimate(scene.panel_pose_gt, 10, True, 0.0)
    pose, _ = _visible(world)
    means = []
    for sigma in (0.005, 0.02, 0.05):
        diag = []
        for trial in range(100):
            det = detect_markers(scene, pose, sigma, sigma, seed=trial)
            diag.append(np.diag(infer_robot_pose(det, panel, reg).covariance))
        diag = np.array(diag)
        assert np.all(diag >= 0)
        means.append(diag.mean(axis=0))
    assert np.all(np.diff(np.array(means), axis=0) > 0)


def test_registry_text_round_trip(world, tmp_path):
    _, _, reg = world
    path = tmp_path / "markers.json"
    reg.save(path)
    back = MarkerRegistry.load(path)
    assert back.ids() == reg.ids()
    for k in reg.ids():
        _close(back.marker(k), reg.marker(k), 1e-12)
    _close(back.T_rc, reg.T_rc, 1e-12)
