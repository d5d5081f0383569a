import numpy as np
import pytest
from scipy.stats import chi2

from _sims import euler_covariance, well_modeled_run
from panelnav.ekf import (DeadReckonTwist, EkfConfig, FeatureDelta, FilterState, FusionFilter, MarkerPose,
                          MeasurementError, MeasurementEvent, PlaneRotation, TimeOrderError, consistent_cross,
                          lag_one_autocorrelation, pose_error, predict, update_delta, update_pose,
                          update_rotation)
from panelnav.geometry import (FramedPose, PoseWithCovariance, geodesic_distance, qconj, qmul, quat_exp,
                               quat_to_matrix)


def _state(p=(1.0, 2.0, 0.5), rv=(0.1, -0.2, 0.3), P=None, t=0.0):
    P = np.eye(9) * 1e-2 if P is None else P
    return FilterState(np.array(p), quat_exp(rv), np.zeros(3), P, t)


def _twist(v=(0.0, 0.0, 0.0), w=(0.0, 0.0, 0.0), C=None):
    return DeadReckonTwist(np.array(v, float), np.array(w, float), np.zeros((6, 6)) if C is None else C)


def _marker(pose: FramedPose, pos_var=1e-4, rot_var=1e-4):
    C = np.zeros((6, 6))
    C[:3, :3] = pos_var * np.eye(3)
    C[3:, 3:] = euler_covariance(pose.orientation, rot_var * np.eye(3))
    return MarkerPose(PoseWithCovariance(pose.retagged("odom", "robot"), 0.5 * (C + C.T)))


# -- prediction -----------------------------------------------------------

def test_zero_twist_grows_covariance_by_q():
    cfg = EkfConfig()
    s = _state()
    out = predict(s, _twist(), 1.0, cfg)
    np.testing.assert_array_equal(out.position, s.position)
    assert geodesic_distance(out.orientation, s.orientation) == 0.0
    np.testing.assert_allclose(out.covariance, s.covariance + cfg.process_noise(1.0), atol=1e-15)
    assert out.timestamp == 1.0


def test_forward_velocity_kinematics():
    s = _state()
    out = predict(s, _twist(v=(0.7, 0, 0)), 2.0)
    np.testing.assert_allclose(out.position, s.position + quat_to_matrix(s.orientation) @ [1.4, 0, 0], atol=1e-14)


def test_half_steps_match_full_step():
    s = _state()
    tw = _twist(v=(0.01, 0.002, -0.001), w=(0.001, -0.002, 0.003))
    one = predict(s, tw, 0.1)
    two = predict(predict(s, tw, 0.05), tw, 0.05)
    assert np.linalg.norm(one.position - two.position) < 1e-6
    assert geodesic_distance(one.orientation, two.orientation) < 1e-6
    np.testing.assert_allclose(one.covariance, two.covariance, atol=1e-6)


def test_negative_dt_rejected():
    with pytest.raises(TimeOrderError):
        predict(_state(), _twist(), -0.1)


# -- absolute update --------------------------------------------------------

def test_dominant_measurement():
    s = _state()
    target = FramedPose("odom", "robot", [1.3, 1.8, 0.4], quat_exp([0.15, -0.1, 0.25]))
    out = update_pose(s, _marker(target, 1e-12, 1e-12))
    assert np.linalg.norm(out.position - target.position) < 1e-6
    assert geodesic_distance(out.orientation, target.orientation) < 1e-6


def test_measurement_at_prior_mean():
    s = _state()
    out = update_pose(s, _marker(s.pose))
    np.testing.assert_allclose(out.position, s.position, atol=1e-15)
    assert geodesic_distance(out.orientation, s.orientation) < 1e-15
    assert np.trace(out.covariance) < np.trace(s.covariance)
    assert np.linalg.eigvalsh(out.covariance).min() > 0


def test_non_psd_measurement_rejected():
    C = -np.eye(6)
    with pytest.raises((MeasurementError, ValueError)):
        update_pose(_state(), MarkerPose(PoseWithCovariance(_state().pose, C)))


def test_repeated_noisy_markers_beat_single():
    truth = FramedPose("odom", "robot", [1.0, 2.0, 0.5], quat_exp([0.1, -0.2, 0.3]))
    rng = np.random.default_rng(0)
    single, fused = [], []
    for trial in range(100):
        s = FilterState(truth.position, truth.orientation, np.zeros(3), np.eye(9) * 1.0)
        for k in range(10):
            m = FramedPose("odom", "robot", truth.position + 0.05 * rng.standard_normal(3),
                           qmul(truth.orientation, quat_exp(0.02 * rng.standard_normal(3))))
            if k == 0:
                single.append(pose_error(m, truth)[0])
            s = update_pose(s, _marker(m, 0.05 ** 2, 0.02 ** 2))
        fused.append(pose_error(s.pose, truth)[0])
    assert np.mean(fused) < np.mean(single)


# -- relative updates -------------------------------------------------------

def _pair():
    prev = _state(t=0.0)
    curr = predict(prev, _twist(v=(0.5, 0.0, 0.0), w=(0.0, 0.0, 0.2)), 1.0)
    return prev, curr


def test_zero_innovation_rotation_and_delta():
    prev, curr = _pair()
    rel_q = qmul(qconj(prev.orientation), curr.orientation)
    out = update_rotation(curr, PlaneRotation(rel_q, np.eye(3) * 1e-4, 0.0, 1.0), prev)
    np.testing.assert_allclose(out.position, curr.position, atol=1e-15)
    assert geodesic_distance(out.orientation, curr.orientation) < 1e-14
    rel = prev.pose.inverse() @ curr.pose
    d = FeatureDelta(rel.retagged("robot_prev", "robot"), np.eye(6) * 1e-4, 0.0, 1.0)
    out = update_delta(curr, d, prev)
    np.testing.assert_allclose(out.position, curr.position, atol=1e-14)
    assert geodesic_distance(out.orientation, curr.orientation) < 1e-14


def test_unobservable_axes_untouched():
    prev, curr = _pair()
    rel_q = qmul(qmul(qconj(prev.orientation), curr.orientation), quat_exp([0.0, 0.0, 0.05]))
    basis = np.array([[0.0], [0.0], [1.0]])
    out = update_rotation(curr, PlaneRotation(rel_q, np.eye(3) * 1e-4, 0.0, 1.0, basis), prev)
    err = qmul(qconj(curr.orientation), out.orientation)
    dtheta = 2 * np.asarray(err[1:])
    assert abs(dtheta[0]) < 1e-12 and abs(dtheta[1]) < 1e-12
    assert abs(dtheta[2]) > 1e-3
    # no information reaches x, y; only the attitude reset rotates a little variance in
    assert np.all(np.diag(out.covariance)[3:5] >= np.diag(curr.covariance)[3:5] - 1e-15)


def test_vague_delta_negligible():
    prev, curr = _pair()
    rel = prev.pose.inverse() @ curr.pose
    off = FramedPose("robot_prev", "robot", rel.position + [0.1, -0.1, 0.05], rel.orientation)
    ratio = 1e6
    d = FeatureDelta(off, np.eye(6) * 1e-2 * ratio, 0.0, 1.0)
    out = update_delta(curr, d, prev)
    assert np.linalg.norm(out.position - curr.position) < 1e-6
    assert geodesic_distance(out.orientation, curr.orientation) < 1e-6


def test_consistent_cross_restores_joint_psd():
    rng = np.random.default_rng(1)
    for _ in range(50):
        A = rng.normal(size=(9, 9))
        B = rng.normal(size=(9, 9))
        P, Pj = A @ A.T + 1e-3 * np.eye(9), B @ B.T + 1e-3 * np.eye(9)
        X = 5 * rng.normal(size=(9, 9))
        Xc = consistent_cross(P, X, Pj)
        joint = np.block([[P, Xc], [Xc.T, Pj]])
        assert np.linalg.eigvalsh(joint).min() > -1e-9 * np.abs(joint).max()
    L = np.linalg.cholesky(np.eye(18) + 0.5 * np.ones((18, 18)))
    J = L @ L.T
    X = J[:9, 9:]
    assert consistent_cross(J[:9, :9], X, J[9:, 9:]) is X


def _circle_run(seed, use_rotation=False, use_delta=False, steps=300, dt=0.1):
    rng = np.random.default_rng([seed, 5])
    bias = np.array([0.02, -0.01, 0.01])
    v, w = np.array([0.5, 0.0, 0.0]), np.array([0.0, 0.0, 0.1])
    true = [FilterState(np.zeros(3), [1, 0, 0, 0], np.zeros(3), np.eye(9) * 1e-6, 0.0)]
    for k in range(steps):
        true.append(predict(true[-1], _twist(v, w), dt))
    flt = FusionFilter(true[0])
    for k in range(steps):
        t0, t1 = k * dt, (k + 1) * dt
        noisy_v = v + bias + 0.01 * rng.standard_normal(3)
        noisy_w = w + bias * 0.5 + 0.002 * rng.standard_normal(3)
        flt.process(MeasurementEvent(t0, _twist(noisy_v, noisy_w, np.diag([1e-4] * 3 + [1e-5] * 3))))
        a, b = true[k], true[k + 1]
        if use_rotation:
            q = qmul(qmul(qconj(a.orientation), b.orientation), quat_exp(1e-3 * rng.standard_normal(3)))
            flt.process(MeasurementEvent(t1, PlaneRotation(q, np.eye(3) * 1e-6, t0, t1)))
        if use_delta:
            rel = a.pose.inverse() @ b.pose
            rel = FramedPose("robot_prev", "robot", rel.position + 0.005 * rng.standard_normal(3),
                             qmul(rel.orientation, quat_exp(1e-3 * rng.standard_normal(3))))
            flt.process(MeasurementEvent(t1, FeatureDelta(rel, np.diag([2.5e-5] * 3 + [1e-6] * 3), t0, t1)))
    est = flt.advance_to(steps * dt)
    return pose_error(est.pose, true[-1].pose), flt


def test_rotation_updates_reduce_heading_drift():
    for seed in range(10):
        (_, dr_only), _ = _circle_run(seed)
        (_, with_rot), flt = _circle_run(seed, use_rotation=True)
        assert with_rot < dr_only
        assert flt.min_eigenvalue >= -1e-10


def test_delta_updates_reduce_position_error():
    better = 0
    for seed in range(10):
        (p0, _), _ = _circle_run(seed)
        (p1, _), flt = _circle_run(seed, use_delta=True)
        better += p1 < p0
        assert flt.min_eigenvalue >= -1e-10
    assert better == 10


# -- streaming filter -------------------------------------------------------

def _stream(seed=0, n=40):
    """Twist events along a constant-twist arc plus noisy markers on the true arc."""
    rng = np.random.default_rng(seed)
    tw = _twist((0.5, 0, 0), (0, 0, 0.1), np.eye(6) * 1e-4)
    truth = FilterState(np.zeros(3), [1, 0, 0, 0], np.zeros(3), np.eye(9), 0.0)
    evs = []
    for k in range(n):
        t = 0.1 * k
        evs.append(MeasurementEvent(t, tw, "twist"))
        if k % 5 == 4:
            at = predict(truth, tw, t + 0.05)
            m = FramedPose("odom", "robot", at.position + rng.normal(0, 0.03, 3), at.orientation)
            evs.append(MeasurementEvent(t + 0.05, _marker(m, 1e-3, 1e-3), "marker"))
    return evs


def _run(events, cfg=None):
    flt = FusionFilter(FilterState(np.zeros(3), [1, 0, 0, 0], np.zeros(3), np.eye(9) * 1e-2), cfg)
    for ev in events:
        flt.process(ev)
    return flt


def test_rollback_replay_matches_sorted_order():
    evs = _stream()
    ordered = _run(evs)
    shuffled = list(evs)
    late = shuffled.pop(20)
    shuffled.insert(26, late)
    replayed = _run(shuffled)
    np.testing.assert_allclose(replayed.state.position, ordered.state.position, atol=1e-12)
    np.testing.assert_allclose(replayed.state.covariance, ordered.state.covariance, atol=1e-12)
    assert replayed.dropped == 0


def test_too_old_event_dropped_and_gap_counted():
    flt = _run(_stream(n=80), EkfConfig(history_seconds=1.0))
    assert flt.process(MeasurementEvent(0.0, _twist())) is False
    assert flt.dropped == 1
    t = flt.state.timestamp
    flt.process(MeasurementEvent(t + 0.1, PlaneRotation([1, 0, 0, 0], np.eye(3) * 1e-4, t - 0.0333, t + 0.1)))
    assert flt.gaps == 1


def test_innovation_gate_rejects_outlier():
    evs = _stream()
    wild = FramedPose("odom", "robot", [50.0, 0, 0], [1, 0, 0, 0])
    evs.append(MeasurementEvent(4.5, _marker(wild, 1e-3, 1e-3), "marker"))
    plain = _run(evs)
    gated = _run(evs, EkfConfig(innovation_gate=0.999))
    assert gated.rejected == 1 and plain.rejected == 0
    assert abs(gated.state.position[0] - 50) > abs(plain.state.position[0] - 50)
    assert gated.nis and max(r.nis for r in gated.nis) <= chi2.ppf(0.999, 6)


def test_deterministic_and_psd():
    a, b = _run(_stream(3)), _run(_stream(3))
    np.testing.assert_array_equal(a.state.covariance, b.state.covariance)
    assert a.min_eigenvalue >= -1e-10


def test_well_modeled_innovation_consistency():
    for seed in range(3):
        flt, _ = well_modeled_run(seed)
        assert np.mean([r.in_band for r in flt.nis]) >= 0.8
        assert flt.min_eigenvalue >= -1e-10


# -- metrics ------------------------------------------------------------------

def test_pose_error_cases():
    a = FramedPose("odom", "robot", [1.0, 2.0, 3.0], quat_exp([0.1, 0.2, 0.3]))
    assert pose_error(a, a) == (0.0, 0.0)
    b = FramedPose("odom", "robot", [2.0, 2.0, 3.0], a.orientation)
    assert pose_error(b, a) == pytest.approx((1.0, 0.0), abs=1e-15)
    with pytest.raises(ValueError):
        pose_error(a, a.retagged("map", "robot"))
    rng = np.random.default_rng(2)
    for _ in range(100):
        x = FramedPose("odom", "robot", rng.normal(size=3), quat_exp(rng.normal(size=3)))
        y = FramedPose("odom", "robot", rng.normal(size=3), quat_exp(rng.normal(size=3)))
        Mx, My = x.matrix(), y.matrix()
        dp = np.linalg.norm(Mx[:3, 3] - My[:3, 3])
        c = np.clip((np.trace(Mx[:3, :3].T @ My[:3, :3]) - 1) / 2, -1, 1)
        dp_e, dr_e = pose_error(x, y)
        assert dp_e == pytest.approx(dp, abs=1e-12)
        if 1e-3 < np.arccos(c) < np.pi - 1e-3:
            assert dr_e == pytest.approx(np.arccos(c), abs=1e-12)


def _traj(xyz, yaw=None):
    yaw = np.zeros(len(xyz)) if yaw is None else yaw
    return [FramedPose("odom", "robot", p, quat_exp([0, 0, y])) for p, y in zip(xyz, yaw)]


def test_lag_one_autocorrelation():
    n = 1000
    ramp = np.column_stack([np.linspace(0, 10, n), np.linspace(0, 5, n), np.linspace(0, 1, n)])
    assert lag_one_autocorrelation(_traj(ramp, np.linspace(0, 3, n))) >= 0.99
    rng = np.random.default_rng(3)
    white = lag_one_autocorrelation(_traj(rng.normal(size=(n, 3)), rng.normal(0, 0.3, n)))
    assert abs(white) < 0.1
    alt = np.zeros((n, 3))
    alt[:, 0] = np.where(np.arange(n) % 2, 1.0, -1.0)
    assert lag_one_autocorrelation(_traj(alt)) == pytest.approx(-1.0, abs=1e-9)
    assert lag_one_autocorrelation(_traj(np.ones((5, 3)))) == 1.0
    with pytest.raises(ValueError):
        lag_one_autocorrelation(_traj(np.ones((2, 3))))
