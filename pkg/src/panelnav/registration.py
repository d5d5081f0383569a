"""Rotation-only registration of plane sets between two frames."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import qcanonical, quat_to_matrix, tangent_basis

log = logging.getLogger(__name__)


class NoDataError(ValueError):
    pass


@dataclass(frozen=True)
class MatchThresholds:
    l_det: float = 1.0
    cross_angle_tol: float = 0.1
    parallel_tol: float = 0.02

    def __post_init__(self):
        if min(self.l_det, self.cross_angle_tol, self.parallel_tol) <= 0:
            raise ValueError("match thresholds must be positive")


@dataclass(frozen=True)
class PlaneCorrespondence:
    index_a: int
    index_b: int
    weight: float


@dataclass(frozen=True)
class RotationEstimate:
    q: np.ndarray           # rotation taking frame-b vectors into frame a
    covariance: np.ndarray  # 4x4, -pinv(H_qq)
    objective: float
    K: np.ndarray
    mu_max: float
    observable_dof: int
    hessian: np.ndarray     # H_qq = 2 (K - mu_max I)

    def tangent_covariance(self, unit_variance: float = 1.0, null_variance: float = 1e6):
        """3x3 covariance of the right-multiplied rotation vector, plus observable basis.

        ``unit_variance`` scales the normalized-weight covariance to physical
        units; unobservable directions are inflated to ``null_variance``.
        """
        Xi = tangent_basis(self.q)
        C = 4.0 * Xi.T @ self.covariance @ Xi * unit_variance
        C = 0.5 * (C + C.T)
        w, V = np.linalg.eigh(-Xi.T @ self.hessian @ Xi)
        tol = 1e-8 * max(abs(self.mu_max), 1e-300)
        observable = V[:, w > tol]
        null = V[:, w <= tol]
        C = C + null_variance * null @ null.T
        return C, observable


# ---------------------------------------------------------------------------
# correspondence tests
# ---------------------------------------------------------------------------

def log_pdet(H) -> float:
    """log of the product of singular values; ``-inf`` when that product is zero."""
    s = np.linalg.svd(np.asarray(H, dtype=float), compute_uv=False)
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        return -np.inf
    return float(np.sum(np.log(s)))


def size_similarity_test(Ha, Hb, l_det: float) -> bool:
    la, lb = log_pdet(Ha), log_pdet(Hb)
    if not (np.isfinite(la) and np.isfinite(lb)):
        log.warning("size-similarity test on a singular Hessian; rejecting pair")
        return False
    return abs(la - lb) < l_det


def cross_angle_test(n1a, n1b, n2a, n2b, tol: float) -> bool:
    """Plane-pair angle in frame a must match the corresponding angle in frame b.

    ``n1a, n1b`` are the two normals in frame a, ``n2a, n2b`` their partners in frame b.
    """
    return abs(float(np.dot(n1a, n1b)) - float(np.dot(n2a, n2b))) < tol


def _parallel_class(c: float, tol: float) -> int:
    if c >= 1.0 - tol:
        return 1
    if c <= -1.0 + tol:
        return -1
    return 0


def parallel_consistency_test(n1a, n1b, n2a, n2b, tol: float) -> bool:
    """Both frames must agree on parallel / antiparallel / non-parallel."""
    return _parallel_class(float(np.dot(n1a, n1b)), tol) == _parallel_class(float(np.dot(n2a, n2b)), tol)


def _pair_consistent(sa, sb, ca, cb, th: MatchThresholds) -> bool:
    if ca.index_a == cb.index_a or ca.index_b == cb.index_b:
        return False
    n1a, n1b = sa[ca.index_a].normal, sa[cb.index_a].normal
    n2a, n2b = sb[ca.index_b].normal, sb[cb.index_b].normal
    return (cross_angle_test(n1a, n1b, n2a, n2b, th.cross_angle_tol)
            and parallel_consistency_test(n1a, n1b, n2a, n2b, th.parallel_tol))


def match_planes(set_a, set_b, thresholds: MatchThresholds | None = None):
    """Candidate pairs surviving the size test and mutual angle consistency.

    Conflicting candidates are pruned greedily: the one with most conflicts
    goes first, ties removing the smaller combined point count.  Each plane is
    then used at most once, preferring the closest log-determinant match.
    Weights are combined point counts normalized to sum 1.
    """
    th = thresholds or MatchThresholds()
    lda = [log_pdet(s.hessian) for s in set_a]
    ldb = [log_pdet(s.hessian) for s in set_b]
    cands = []
    for i, sa in enumerate(set_a):
        for j, sb in enumerate(set_b):
            if size_similarity_test(sa.hessian, sb.hessian, th.l_det):
                cands.append((i, j))
    if not cands:
        return []
    single = len(set_a) == 1 or len(set_b) == 1

    def count(c):
        return set_a[c[0]].count + set_b[c[1]].count

    def ldiff(c):
        return abs(lda[c[0]] - ldb[c[1]])

    # one correspondence per plane per side, best size agreement first
    def unique(cs):
        used_a, used_b, out = set(), set(), []
        for c in sorted(cs, key=lambda c: (ldiff(c), -count(c), c)):
            if c[0] in used_a or c[1] in used_b:
                continue
            used_a.add(c[0])
            used_b.add(c[1])
            out.append(c)
        return out

    if not single:
        corr = [PlaneCorrespondence(i, j, 0.0) for i, j in cands]
        alive = list(range(len(corr)))
        while True:
            conflicts = {k: 0 for k in alive}
            for x in range(len(alive)):
                for y in range(x + 1, len(alive)):
                    a, b = corr[alive[x]], corr[alive[y]]
                    # two candidates sharing a plane are alternatives, not contradictions
                    if a.index_a == b.index_a or a.index_b == b.index_b:
                        continue
                    if not _pair_consistent(set_a, set_b, a, b, th):
                        conflicts[alive[x]] += 1
                        conflicts[alive[y]] += 1
            worst = max(alive, key=lambda k: (conflicts[k], -count(cands[k]), k), default=None)
            if worst is None or conflicts[worst] == 0:
                break
            alive.remove(worst)
        cands = [cands[k] for k in alive]
    chosen = unique(cands)
    total = float(sum(count(c) for c in chosen))
    return [PlaneCorrespondence(i, j, count((i, j)) / total) for i, j in sorted(chosen)]


# ---------------------------------------------------------------------------
# Davenport q-method
# ---------------------------------------------------------------------------

def davenport_matrix(normals_a, normals_b, weights) -> np.ndarray:
    """K with ``q^T K q = sum w_i n_a,i . R(q) n_b,i`` for scalar-first quaternions."""
    na = np.asarray(normals_a, dtype=float).reshape(-1, 3)
    nb = np.asarray(normals_b, dtype=float).reshape(-1, 3)
    w = np.asarray(weights, dtype=float).reshape(-1)
    B = (w[:, None] * na).T @ nb  # sum w a b^T
    sigma = np.trace(B)
    S = B + B.T
    z = np.array([B[2, 1] - B[1, 2], B[0, 2] - B[2, 0], B[1, 0] - B[0, 1]])
    K = np.empty((4, 4))
    K[0, 0] = sigma
    K[0, 1:] = z
    K[1:, 0] = z
    K[1:, 1:] = S - sigma * np.eye(3)
    return K


def davenport_quaternions(na, nb, w) -> np.ndarray:
    """Batched optimal quaternions for stacks ``na, nb`` (B, n, 3) and weights (B, n); no covariance."""
    B = np.einsum("kn,kni,knj->kij", w, na, nb)
    sigma = np.trace(B, axis1=1, axis2=2)
    K = np.empty((len(B), 4, 4))
    K[:, 0, 0] = sigma
    z = np.stack([B[:, 2, 1] - B[:, 1, 2], B[:, 0, 2] - B[:, 2, 0], B[:, 1, 0] - B[:, 0, 1]], axis=1)
    K[:, 0, 1:] = z
    K[:, 1:, 0] = z
    K[:, 1:, 1:] = B + np.transpose(B, (0, 2, 1)) - sigma[:, None, None] * np.eye(3)
    _, V = np.linalg.eigh(K)
    q = V[:, :, -1]
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def wahba_objective(q, normals_a, normals_b, weights) -> float:
    R = quat_to_matrix(q)
    na = np.asarray(normals_a, dtype=float).reshape(-1, 3)
    nb = np.asarray(normals_b, dtype=float).reshape(-1, 3)
    return float(np.sum(np.asarray(weights) * np.einsum("ij,ij->i", na, nb @ R.T)))


def estimate_rotation(normals_a, normals_b, weights, rank_tol: float = 1e-8) -> RotationEstimate:
    """Rotation ``R`` maximizing ``sum w_i n_a,i . R n_b,i`` (maps frame-b vectors into frame a)."""
    na = np.asarray(normals_a, dtype=float).reshape(-1, 3)
    if len(na) == 0:
        raise NoDataError("no plane correspondences to register")
    K = davenport_matrix(normals_a, normals_b, weights)
    w, V = np.linalg.eigh(K)
    mu = float(w[-1])
    q = qcanonical(V[:, -1] / np.linalg.norm(V[:, -1]))
    Hqq = 2.0 * (K - mu * np.eye(4))
    C = -np.linalg.pinv(Hqq, rcond=1e-12, hermitian=True)
    Xi = tangent_basis(q)
    tang = np.linalg.eigvalsh(-Xi.T @ Hqq @ Xi)
    dof = int(np.sum(tang > rank_tol * max(abs(mu), 1e-300)))
    return RotationEstimate(q, 0.5 * (C + C.T), float(q @ K @ q), K, mu, dof, Hqq)


def register_planes(set_a, set_b, thresholds: MatchThresholds | None = None):
    """Match two segment lists and estimate the rotation; ``None`` without correspondences."""
    corr = match_planes(set_a, set_b, thresholds)
    if not corr:
        return None, corr
    na = [set_a[c.index_a].normal for c in corr]
    nb = [set_b[c.index_b].normal for c in corr]
    return estimate_rotation(na, nb, [c.weight for c in corr]), corr
