"""Region-growing plane segmentation with incremental second moments."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PlaneMoments:
    """Raw moments of a point set: count, sum of points, sum of outer products."""

    n: int = 0
    sum_p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    S: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    @classmethod
    def from_points(cls, pts) -> "PlaneMoments":
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        return cls(len(pts), pts.sum(axis=0), pts.T @ pts)

    @property
    def mean(self) -> np.ndarray:
        if self.n == 0:
            raise DegenerateGeometryError("mass center of an empty set")
        return self.sum_p / self.n

    @property
    def scatter(self) -> np.ndarray:
        """Centered scatter matrix ``sum (p - m)(p - m)^T``."""
        if self.n == 0:
            return np.zeros((3, 3))
        m = self.sum_p / self.n
        A = self.S - self.n * np.outer(m, m)
        return 0.5 * (A + A.T)

    def __add__(self, other: "PlaneMoments") -> "PlaneMoments":
        return PlaneMoments(self.n + other.n, self.sum_p + other.sum_p, self.S + other.S)


def update_moments(mom: PlaneMoments, p) -> PlaneMoments:
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    return PlaneMoments(mom.n + 1, mom.sum_p + p, mom.S + np.outer(p, p))


@dataclass(frozen=True)
class PlaneFit:
    normal: np.ndarray
    offset: float
    rms: float
    hessian: np.ndarray


def fit_plane(mom: PlaneMoments, viewpoint=(0.0, 0.0, 0.0), sigma0: float = 1.0) -> PlaneFit:
    """Total-least-squares plane of a moment set.

    The normal is the eigenvector of the scatter matrix with the smallest
    eigenvalue, oriented towards ``viewpoint``.  The Hessian is the
    Gauss-Newton information of (two normal tilts, offset at the mass center)
    for isotropic point noise ``sigma0``; it is diagonal in the scatter
    eigenbasis and scales linearly with the point count.
    """
    if mom.n < 3:
        raise DegenerateGeometryError(f"need at least 3 points, got {mom.n}")
    A = mom.scatter
    w, V = np.linalg.eigh(A)
    tr = max(float(np.trace(A)), 0.0)
    if tr <= 0 or w[1] < 1e-12 * tr:
        raise DegenerateGeometryError("points are collinear or coincident")
    n = V[:, 0]
    m = mom.mean
    if n @ (np.asarray(viewpoint, dtype=float) - m) < 0:
        n = -n
    rms = math.sqrt(max(float(w[0]), 0.0) / mom.n)
    H = np.diag([w[2], w[1], float(mom.n)]) / sigma0 ** 2
    return PlaneFit(n, float(n @ m), rms, H)


@dataclass(frozen=True)
class ExtractionParams:
    k_neighbors: int = 8
    distance_threshold: float = 0.06
    rms_threshold: float = 0.04
    min_points: int = 50
    hole_cell: float = 0.05
    max_retests: int = 3

    @classmethod
    def for_noise(cls, sigma: float, **kw) -> "ExtractionParams":
        """Defaults scaled to an expected depth noise (floored at 5 mm)."""
        s = max(sigma, 0.005)
        return cls(distance_threshold=3 * s, rms_threshold=2 * s, **kw)

    def __post_init__(self):
        if min(self.k_neighbors, self.distance_threshold, self.rms_threshold,
               self.min_points, self.hole_cell) <= 0:
            raise ValueError("extraction parameters must be positive")


@dataclass(frozen=True)
class PlaneSegment:
    normal: np.ndarray
    offset: float
    moments: PlaneMoments
    member_indices: np.ndarray
    rms_distance: float
    hessian: np.ndarray
    hole_count: int

    @property
    def count(self) -> int:
        return int(self.moments.n)

    def row(self, seg_id: int) -> str:
        n = self.normal
        return (f"{seg_id} {n[0]:.9f} {n[1]:.9f} {n[2]:.9f} {self.offset:.9f} "
                f"{self.count} {self.rms_distance:.9f} {self.hole_count}")


def count_holes(pts, normal, cell: float) -> int:
    """Interior empty 4-connected regions of the members rasterized on their plane."""
    pts = np.asarray(pts, dtype=float)
    if len(pts) < 3:
        return 0
    n = np.asarray(normal, dtype=float)
    e1 = np.cross(n, [1.0, 0.0, 0.0])
    if np.linalg.norm(e1) < 0.5:
        e1 = np.cross(n, [0.0, 1.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    uv = np.column_stack([pts @ e1, pts @ e2])
    # tolerance keeps lattice-aligned samples from straddling cell borders
    ij = np.floor((uv - uv.min(axis=0)) / cell + 1e-9).astype(int)
    shape = ij.max(axis=0) + 1
    grid = np.zeros(shape, dtype=bool)
    grid[ij[:, 0], ij[:, 1]] = True
    labels, count = ndimage.label(~grid)
    if count == 0:
        return 0
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    return int(count - np.count_nonzero(border))


def _segment_from(cloud, idx, viewpoint, params: ExtractionParams) -> PlaneSegment:
    mom = PlaneMoments.from_points(cloud[idx])
    fit = fit_plane(mom, viewpoint, params.distance_threshold / 3.0)
    holes = count_holes(cloud[idx], fit.normal, params.hole_cell)
    return PlaneSegment(fit.normal, fit.offset, mom, np.asarray(idx, dtype=int), fit.rms,
                        fit.hessian, holes)


def extract_planes(cloud, params: ExtractionParams | None = None, viewpoint=(0.0, 0.0, 0.0)):
    """Segment ``cloud`` into planes by region growing.

    Returns ``(segments, noise_indices)``.  A region starts from a seed and
    its nearest unassigned neighbour and grows through the k-nearest-neighbour
    graph.  A candidate joins when its distance to the current plane is below
    ``distance_threshold`` and the region's rms along the current normal
    after adding it stays below ``rms_threshold``; the plane is refit after
    every addition.  Members that end up beyond the threshold of the final
    fit are released, and regions smaller than ``min_points`` dissolve to noise.
    """
    params = params or ExtractionParams()
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    N = len(cloud)
    if N < max(3, params.min_points):
        return [], np.arange(N)
    k = min(params.k_neighbors + 1, N)
    tree = cKDTree(cloud)
    _, knn = tree.query(cloud, k=k)
    knn = knn[:, 1:].tolist()
    P = cloud.tolist()
    vp = np.asarray(viewpoint, dtype=float)

    assigned = np.zeros(N, dtype=bool)
    noise_mask = np.zeros(N, dtype=bool)
    segments = []
    dt = params.distance_threshold
    rms2 = params.rms_threshold ** 2
    tried = {}

    for seed in range(N):
        if assigned[seed] or noise_mask[seed]:
            continue
        partner = next((j for j in knn[seed] if not assigned[j] and not noise_mask[j]), None)
        if partner is None or not _locally_planar(cloud, seed, knn[seed], params.rms_threshold):
            noise_mask[seed] = True
            continue
        members = [seed, partner]
        in_region = {seed, partner}
        # raw moments kept as floats: count, sums, upper triangle of sum p p^T
        n_ = 0
        sx = sy = sz = sxx = sxy = sxz = syy = syz = szz = 0.0
        for m_ in members:
            px, py, pz = P[m_]
            n_ += 1
            sx += px; sy += py; sz += pz
            sxx += px * px; sxy += px * py; sxz += px * pz
            syy += py * py; syz += py * pz; szz += pz * pz
        normal = None
        d = s_n = s_nn = 0.0
        queue = deque()
        for m_ in members:
            queue.extend(knn[m_])
        tried.clear()
        while queue:
            j = queue.popleft()
            if j in in_region or assigned[j]:
                continue
            px, py, pz = P[j]
            if normal is not None:
                a = normal[0] * px + normal[1] * py + normal[2] * pz
                if abs(a - d) >= dt:
                    tried[j] = tried.get(j, 0) + 1
                    continue
                n1 = n_ + 1
                sn = s_n + a
                var = (s_nn + a * a - sn * sn / n1) / n1
                if var >= rms2:
                    tried[j] = tried.get(j, 0) + 1
                    continue
            members.append(j)
            in_region.add(j)
            n_ += 1
            sx += px; sy += py; sz += pz
            sxx += px * px; sxy += px * py; sxz += px * pz
            syy += py * py; syz += py * pz; szz += pz * pz
            if n_ >= 3:
                mx, my, mz = sx / n_, sy / n_, sz / n_
                A = np.array([[sxx - n_ * mx * mx, sxy - n_ * mx * my, sxz - n_ * mx * mz],
                              [0.0, syy - n_ * my * my, syz - n_ * my * mz],
                              [0.0, 0.0, szz - n_ * mz * mz]])
                w, V = np.linalg.eigh(A, UPLO="U")
                if w[1] > 1e-12 * max(w[0] + w[1] + w[2], 1e-300):
                    nx, ny, nz = V[0, 0], V[1, 0], V[2, 0]
                    normal = (nx, ny, nz)
                    d = nx * mx + ny * my + nz * mz
                    s_n = nx * sx + ny * sy + nz * sz
                    s_nn = (nx * nx * sxx + ny * ny * syy + nz * nz * szz
                            + 2.0 * (nx * ny * sxy + nx * nz * sxz + ny * nz * syz))
            for nb in knn[j]:
                if nb not in in_region and not assigned[nb] and tried.get(nb, 0) < params.max_retests:
                    queue.append(nb)

        idx = np.array(members, dtype=int)
        idx = _settle_members(cloud, idx, dt)
        if len(idx) >= params.min_points:
            segments.append(_segment_from(cloud, np.sort(idx), vp, params))
            assigned[idx] = True
        else:
            noise_mask[seed] = True

    noise = np.flatnonzero(~assigned)
    return segments, noise


def _locally_planar(cloud, seed, neighbours, rms_threshold) -> bool:
    patch = cloud[[seed] + list(neighbours)]
    if len(patch) < 3:
        return False
    A = PlaneMoments.from_points(patch).scatter
    return math.sqrt(max(np.linalg.eigvalsh(A)[0], 0.0) / len(patch)) < 0.5 * rms_threshold


def _settle_members(cloud, idx, dt):
    """Drop members beyond the distance threshold of the final fit until stable."""
    for _ in range(10):
        if len(idx) < 3:
            return idx
        try:
            fit = fit_plane(PlaneMoments.from_points(cloud[idx]))
        except DegenerateGeometryError:
            return idx[:0]
        dist = np.abs(cloud[idx] @ fit.normal - fit.offset)
        keep = dist < dt
        if keep.all():
            return idx
        idx = idx[keep]
    return idx[:0]
