"""Log-odds occupancy grid and the nearest-occupied-voxel point filter."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

_BIAS = 1 << 20
_MASK = (1 << 21) - 1


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _pack(idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64) + _BIAS
    return (idx[..., 0] << 42) | (idx[..., 1] << 21) | idx[..., 2]


def _unpack(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([(keys >> 42) & _MASK, (keys >> 21) & _MASK, keys & _MASK], axis=-1) - _BIAS


@dataclass
class OccupancyMap:
    resolution: float = 0.1
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p_hit: float = 0.7
    p_miss: float = 0.4
    clamp_min: float | None = -2.0
    clamp_max: float | None = 3.5
    occupied_threshold: float = 0.5
    log_odds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)

    @property
    def l_hit(self) -> float:
        return logit(self.p_hit)

    @property
    def l_miss(self) -> float:
        return logit(self.p_miss)

    def copy(self) -> "OccupancyMap":
        return OccupancyMap(self.resolution, self.origin.copy(), self.p_hit, self.p_miss,
                            self.clamp_min, self.clamp_max, self.occupied_threshold,
                            dict(self.log_odds))

    def voxel_index(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.floor((pts - self.origin) / self.resolution).astype(np.int64)

    def voxel_center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def probability(self, pt) -> float:
        key = int(_pack(self.voxel_index(pt))[0])
        return 1.0 - 1.0 / (1.0 + math.exp(self.log_odds.get(key, 0.0)))

    def _clamp(self, v: float) -> float:
        if self.clamp_min is not None and v < self.clamp_min:
            return self.clamp_min
        if self.clamp_max is not None and v > self.clamp_max:
            return self.clamp_max
        return v

    def _apply(self, keys, delta: float):
        lo = self.log_odds
        for k in keys.tolist():
            lo[k] = self._clamp(lo.get(k, 0.0) + delta)

    def occupied_centers(self) -> np.ndarray:
        thr = logit(self.occupied_threshold) if 0 < self.occupied_threshold < 1 else 0.0
        keys = np.array([k for k, v in self.log_odds.items() if v >= thr], dtype=np.int64)
        if keys.size == 0:
            return np.zeros((0, 3))
        keys.sort()
        return self.voxel_center(_unpack(keys))

    # -- serialization ------------------------------------------------------

    def dumps(self) -> str:
        buf = io.StringIO()
        occ = len(self.occupied_centers())
        buf.write("# occupancy-map v1\n")
        buf.write(f"resolution {self.resolution!r}\n")
        buf.write("origin {!r} {!r} {!r}\n".format(*map(float, self.origin)))
        buf.write(f"params {self.p_hit!r} {self.p_miss!r} {self.clamp_min!r} "
                  f"{self.clamp_max!r} {self.occupied_threshold!r}\n")
        buf.write(f"counts {len(self.log_odds)} {occ}\n")
        keys = np.array(sorted(self.log_odds), dtype=np.int64)
        if keys.size:
            centers = self.voxel_center(_unpack(keys))
            for c, k in zip(centers, keys.tolist()):
                buf.write(f"{c[0]:.6f} {c[1]:.6f} {c[2]:.6f} {self.log_odds[k]:.9g}\n")
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "OccupancyMap":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        head = {}
        rows = []
        for ln in lines:
            parts = ln.split()
            if parts[0] in ("resolution", "origin", "params", "counts"):
                head[parts[0]] = parts[1:]
            else:
                rows.append([float(v) for v in parts])

        def opt(s):
            return None if s == "None" else float(s)

        p_hit, p_miss, cmin, cmax, thr = head["params"]
        m = cls(resolution=float(head["resolution"][0]),
                origin=np.array([float(v) for v in head["origin"]]),
                p_hit=float(p_hit), p_miss=float(p_miss), clamp_min=opt(cmin),
                clamp_max=opt(cmax), occupied_threshold=float(thr))
        if rows:
            arr = np.array(rows)
            keys = _pack(m.voxel_index(arr[:, :3]))
            m.log_odds = dict(zip(keys.tolist(), arr[:, 3].tolist()))
        expected = int(head["counts"][0])
        if len(m.log_odds) != expected:
            raise ValueError(f"map body has {len(m.log_odds)} voxels, header says {expected}")
        return m

    @classmethod
    def load(cls, path) -> "OccupancyMap":
        return cls.loads(Path(path).read_text())


def traverse(m: OccupancyMap, origin, endpoints) -> np.ndarray:
    """Voxel keys crossed by each ray from ``origin`` up to (excluding) its endpoint voxel.

    Amanatides-Woo integer walk, vectorized across rays.
    """
    endpoints = np.atleast_2d(np.asarray(endpoints, dtype=float))
    if endpoints.size == 0:
        return np.zeros(0, dtype=np.int64)
    res = m.resolution
    o = (np.asarray(origin, dtype=float) - m.origin) / res
    e = (endpoints - m.origin) / res
    d = e - o
    cur = np.repeat(np.floor(o).astype(np.int64)[None, :], len(e), axis=0)
    end = np.floor(e).astype(np.int64)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(d != 0, 1.0 / np.abs(d), np.inf)
        nxt = np.where(step > 0, np.floor(o) + 1 - o, o - np.floor(o))
        t_max = np.where(d != 0, nxt * inv, np.inf)
    t_delta = inv
    n_steps = np.abs(end - cur).sum(axis=1)
    out = []
    active = n_steps > 0
    rows = np.arange(len(e))
    while active.any():
        out.append(cur[active].copy())
        ax = np.argmin(t_max, axis=1)
        sel = rows[active]
        a = ax[active]
        cur[sel, a] += step[sel, a]
        t_max[sel, a] += t_delta[sel, a]
        n_steps[sel] -= 1
        active = n_steps > 0
    if not out:
        return np.zeros(0, dtype=np.int64)
    return _pack(np.concatenate(out))


def integrate_cloud(m: OccupancyMap, cloud, sensor_origin, free_endpoints=None) -> OccupancyMap:
    """Fold one point cloud (odometry frame) into the map in place and return it.

    ``free_endpoints`` are max-range ends of rays that returned nothing; every
    voxel up to and including them counts as a miss.  Each voxel is touched
    at most once per cloud; hits take precedence over misses.
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    free = np.zeros((0, 3)) if free_endpoints is None else np.asarray(free_endpoints, dtype=float).reshape(-1, 3)
    if len(cloud) == 0 and len(free) == 0:
        return m
    if not (np.all(np.isfinite(cloud)) and np.all(np.isfinite(free)) and np.all(np.isfinite(sensor_origin))):
        raise ValueError("cloud and sensor origin must be finite")
    hits = np.unique(_pack(m.voxel_index(cloud))) if len(cloud) else np.zeros(0, dtype=np.int64)
    crossed = [traverse(m, sensor_origin, cloud)]
    if len(free):
        crossed += [traverse(m, sensor_origin, free), _pack(m.voxel_index(free))]
    misses = np.setdiff1d(np.unique(np.concatenate(crossed)), hits, assume_unique=True)
    m._apply(misses, m.l_miss)
    m._apply(hits, m.l_hit)
    return m


class OccupiedIndex:
    """Exact nearest-neighbour index over occupied voxel centers.

    Backed by a median-split kd-tree; immutable after construction.
    """

    def __init__(self, centers):
        self.centers = np.asarray(centers, dtype=float).reshape(-1, 3)
        self.centers.setflags(write=False)
        self._tree = cKDTree(self.centers, balanced_tree=True) if len(self.centers) else None

    def __len__(self) -> int:
        return len(self.centers)

    def query(self, pts, upper_bound: float = np.inf):
        """Return (distances, indices); misses report ``inf`` and index ``-1``."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self._tree is None:
            return np.full(len(pts), np.inf), np.full(len(pts), -1)
        d, i = self._tree.query(pts, k=1, distance_upper_bound=upper_bound)
        i = np.where(np.isfinite(d), i, -1)
        return d, i


def build_index(m: OccupancyMap) -> OccupiedIndex:
    return OccupiedIndex(m.occupied_centers())


def filter_cloud(index: OccupiedIndex, cloud, radius: float):
    """Keep points whose nearest occupied voxel center lies within ``radius``.

    Returns (survivors, keep_mask, rejected_count); survivor order is preserved.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        return cloud.copy(), np.zeros(0, dtype=bool), 0
    d, _ = index.query(cloud, upper_bound=radius * (1 + 1e-12))
    keep = d <= radius
    return cloud[keep], keep, int((~keep).sum())
