import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from panelnav.geometry import geodesic_distance, qconj, quat_to_matrix
from panelnav.planes import PlaneMoments, PlaneSegment
from panelnav.registration import (MatchThresholds, NoDataError, cross_angle_test, estimate_rotation, match_planes,
                                   parallel_consistency_test, register_planes, size_similarity_test,
                                   wahba_objective)


def _seg(normal, count=500):
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    return PlaneSegment(n, 0.0, PlaneMoments(count), np.arange(count), 0.0, count * np.eye(3), 0)


def _rand_rot(rng):
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def test_size_similarity():
    H = np.diag([3.0, 2.0, 1.0])
    assert size_similarity_test(H, H, 0.1)
    assert not size_similarity_test(H, 10 * H, 1.0)
    assert abs(3 * np.log(10) - 6.907755) < 1e-6
    R = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
    assert size_similarity_test(H, R.T @ H @ R, 1e-9)
    assert not size_similarity_test(np.zeros((3, 3)), H, 1.0)


def test_cross_angle():
    ex, ey = np.eye(3)[:2]
    assert cross_angle_test(ex, ey, ey, -ex, 0.05)
    n80 = np.array([np.cos(np.radians(80)), np.sin(np.radians(80)), 0.0])
    assert not cross_angle_test(ex, ey, ex, n80, 0.05)


def test_parallel_consistency():
    ex, ey = np.eye(3)[:2]
    assert parallel_consistency_test(ex, ex, ey, ey, 0.02)
    assert not parallel_consistency_test(ex, ex, ey, -ey, 0.02)
    assert parallel_consistency_test(ex, ey, ex, ey, 0.02)


def test_match_recovers_rotated_set():
    rng = np.random.default_rng(0)
    normals = [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0.2]]
    counts = [300, 900, 2700, 8100]  # distinct sizes so pairing is unambiguous
    for _ in range(20):
        R = quat_to_matrix(_rand_rot(rng))
        a = [_seg(n, c) for n, c in zip(normals, counts)]
        b = [_seg(R.T @ (np.asarray(n) / np.linalg.norm(n)), c) for n, c in zip(normals, counts)]
        corr = match_planes(a, b)
        assert [(c.index_a, c.index_b) for c in corr] == [(i, i) for i in range(4)]
        assert sum(c.weight for c in corr) == pytest.approx(1.0)


def test_match_singleton_and_size_reject():
    a = [_seg([0, 0, 1])]
    corr = match_planes(a, [_seg([0, 0, 1])])
    assert len(corr) == 1 and corr[0].weight == pytest.approx(1.0)
    assert match_planes(a, [_seg([0, 0, 1], 500 * 100)], MatchThresholds(l_det=1.0)) == []


def test_match_invariant_under_common_rotation():
    rng = np.random.default_rng(1)
    a = [_seg(n, c) for n, c in zip(np.eye(3), [400, 1200, 3600])]
    b = [_seg(n, c) for n, c in zip(np.eye(3), [400, 1200, 3600])]
    R = quat_to_matrix(_rand_rot(rng))
    b_rot = [_seg(R @ s.normal, s.count) for s in b]
    assert [(c.index_a, c.index_b) for c in match_planes(a, b)] == \
           [(c.index_a, c.index_b) for c in match_planes(a, b_rot)]


def test_identity_registration():
    rng = np.random.default_rng(2)
    n = rng.normal(size=(4, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    w = np.array([0.1, 0.2, 0.3, 0.4])
    est = estimate_rotation(n, n, w)
    assert geodesic_distance(est.q, [1, 0, 0, 0]) < 1e-9
    assert est.objective == pytest.approx(w.sum())
    assert est.observable_dof == 3


def test_rotation_oracle_orthonormal_normals():
    rng = np.random.default_rng(3)
    for _ in range(100):
        q = _rand_rot(rng)
        R = quat_to_matrix(q)
        na = np.eye(3)
        nb = na @ R  # rows R^T n_a
        est = estimate_rotation(na, nb, [1 / 3] * 3)
        assert geodesic_distance(est.q, q) < 1e-9
        assert est.q[0] >= 0


def test_parallel_normals_degenerate():
    rng = np.random.default_rng(4)
    nz = np.array([[0, 0, 1.0]] * 3)
    est = estimate_rotation(nz, nz, [0.2, 0.3, 0.5])
    assert est.observable_dof == 2
    C, B = est.tangent_covariance(unit_variance=1.0, null_variance=0.0)
    assert B.shape == (3, 2)
    # null direction of the tangent covariance is the z rotation
    w, V = np.linalg.eigh(C)
    assert w[0] < 1e-9 * w[-1]
    assert abs(abs(V[:, 0] @ [0, 0, 1]) - 1) < 1e-6
    # rotated about an arbitrary axis: null direction follows the common normal
    q = _rand_rot(rng)
    R = quat_to_matrix(q)
    n = np.array([[0.6, 0.0, 0.8]] * 3)
    est = estimate_rotation(n, n @ R, [1, 1, 1])
    C, _ = est.tangent_covariance(null_variance=0.0)
    w, V = np.linalg.eigh(C)
    axis_body = R.T @ n[0]  # right-multiplied perturbation: axis in frame b
    assert abs(abs(V[:, 0] @ axis_body) - 1) < 1e-6
    assert est.observable_dof == 2


def test_global_optimum_spot_check():
    rng = np.random.default_rng(5)
    na = rng.normal(size=(5, 3))
    na /= np.linalg.norm(na, axis=1, keepdims=True)
    nb = rng.normal(size=(5, 3))
    nb /= np.linalg.norm(nb, axis=1, keepdims=True)
    w = rng.uniform(0.1, 1, 5)
    est = estimate_rotation(na, nb, w)
    best = est.objective
    assert best == pytest.approx(wahba_objective(est.q, na, nb, w), abs=1e-12)
    for _ in range(1000):
        assert wahba_objective(_rand_rot(rng), na, nb, w) <= best + 1e-12


def test_swapped_frames_give_conjugate():
    rng = np.random.default_rng(6)
    for _ in range(50):
        q = _rand_rot(rng)
        na = rng.normal(size=(4, 3))
        na /= np.linalg.norm(na, axis=1, keepdims=True)
        nb = na @ quat_to_matrix(q) + rng.normal(0, 0.01, (4, 3))
        nb /= np.linalg.norm(nb, axis=1, keepdims=True)
        w = rng.uniform(0.1, 1, 4)
        a = estimate_rotation(na, nb, w)
        b = estimate_rotation(nb, na, w)
        assert geodesic_distance(a.q, qconj(b.q)) < 1e-9


def test_weight_scaling():
    rng = np.random.default_rng(7)
    na = rng.normal(size=(4, 3))
    na /= np.linalg.norm(na, axis=1, keepdims=True)
    nb = na + rng.normal(0, 0.05, (4, 3))
    nb /= np.linalg.norm(nb, axis=1, keepdims=True)
    w = rng.uniform(0.1, 1, 4)
    a = estimate_rotation(na, nb, w)
    b = estimate_rotation(na, nb, 7.5 * w)
    assert geodesic_distance(a.q, b.q) < 1e-9
    np.testing.assert_allclose(b.hessian, 7.5 * a.hessian, atol=1e-9)


def test_covariance_psd_and_empty():
    rng = np.random.default_rng(8)
    na = rng.normal(size=(3, 3))
    na /= np.linalg.norm(na, axis=1, keepdims=True)
    est = estimate_rotation(na, na, [1, 1, 1])
    assert np.linalg.eigvalsh(est.covariance).min() > -1e-12
    assert est.mu_max >= np.linalg.eigvalsh(est.K).max() - 1e-12
    with pytest.raises(NoDataError):
        estimate_rotation(np.zeros((0, 3)), np.zeros((0, 3)), [])
    assert register_planes([], [_seg([0, 0, 1])])[0] is None


def test_bulk_rotation_exactness_and_speed():
    rng = np.random.default_rng(9)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        q = _rand_rot(rng)
        k = rng.integers(3, 6)
        na = np.eye(3)[rng.permutation(3)] + rng.normal(0, 0.2, (3, 3))
        na = np.vstack([na, rng.normal(size=(k - 3, 3))])
        na /= np.linalg.norm(na, axis=1, keepdims=True)
        est = estimate_rotation(na, na @ quat_to_matrix(q), np.full(k, 1.0 / k))
        worst = max(worst, geodesic_distance(est.q, q))
    assert worst < 1e-9
    assert time.perf_counter() - t0 < 1.0
