"""Synthetic panel scene: geometry, circling trajectory, depth/image/marker sensors.

The panel footprint is a rounded square in the panel frame (z up, origin at the
footprint centre).  Faces 0..2 are panel sides 1..3; face 3 is the rear plate,
which closes the loop the robot circles.  Corners are vertical quarter
cylinders.  Everything is a pure function of its inputs and seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import ndtr

from .geometry import FramedPose, quat_exp, qmul, matrix_to_quat

SIDE_NAMES = ("side1", "side2", "side3", "rear")


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraModel:
    width: int = 64
    height: int = 48
    hfov_deg: float = 60.0
    max_range: float = 6.0

    @property
    def fx(self) -> float:
        return 0.5 * self.width / np.tan(np.radians(0.5 * self.hfov_deg))

    @property
    def cx(self) -> float:
        return 0.5 * (self.width - 1)

    @property
    def cy(self) -> float:
        return 0.5 * (self.height - 1)

    def ray_directions(self) -> np.ndarray:
        """(H, W, 3) camera-frame ray directions with unit z component."""
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fx,
                         np.ones_like(u, dtype=float)], axis=-1)

    def project(self, p_cam) -> np.ndarray:
        p = np.asarray(p_cam, dtype=float)
        return np.array([self.fx * p[0] / p[2] + self.cx, self.fx * p[1] / p[2] + self.cy])


@dataclass(frozen=True)
class PanelSide:
    name: str
    normal: tuple
    offset: float
    u_extent: float
    z_extent: float
    texture_density: float

    @property
    def tangent(self) -> np.ndarray:
        n = np.asarray(self.normal)
        return np.array([-n[1], n[0], 0.0])


@dataclass(frozen=True)
class Marker:
    marker_id: int
    pose: FramedPose  # T^P_M
    edge: float


def _robot_to_camera() -> FramedPose:
    # optical axes: camera z -> robot x, camera x -> -robot y, camera y -> -robot z
    R = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    return FramedPose("robot", "camera", [0.2, 0.0, 0.0], matrix_to_quat(R))


@dataclass(frozen=True)
class Scene:
    seed: int
    side_length: float
    corner_radius: float
    height: float
    sides: tuple
    markers: tuple
    panel_pose_gt: FramedPose
    camera: CameraModel = field(default_factory=CameraModel)
    camera_extrinsics: FramedPose = field(default_factory=_robot_to_camera)
    landmarks: np.ndarray = field(default=None, repr=False)
    landmark_side: np.ndarray = field(default=None, repr=False)

    @property
    def half_width(self) -> float:
        return 0.5 * self.side_length

    @property
    def flat_half(self) -> float:
        return self.half_width - self.corner_radius

    def side_texture_density(self) -> list:
        return [s.texture_density for s in self.sides]

    def corner_centers(self) -> np.ndarray:
        f = self.flat_half
        return np.array([[f, f], [-f, f], [-f, -f], [f, -f]], dtype=float)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "side_length": self.side_length,
            "corner_radius": self.corner_radius,
            "height": self.height,
            "sides": [asdict(s) for s in self.sides],
            "markers": [{"id": m.marker_id, "edge": m.edge, "pose": list(m.pose.as_tuple())}
                        for m in self.markers],
            "panel_pose_gt": list(self.panel_pose_gt.as_tuple()),
            "camera": asdict(self.camera),
            "camera_extrinsics": list(self.camera_extrinsics.as_tuple()),
        }


def _marker_pose(side: PanelSide, u: float, z: float) -> FramedPose:
    n = np.asarray(side.normal, dtype=float)
    t = side.tangent
    R = np.column_stack([t, np.cross(n, t), n])
    return FramedPose("panel", "marker", n * side.offset + t * u + np.array([0, 0, z]),
                      matrix_to_quat(R))


def build_panel_scene(seed: int = 0, side_length: float = 3.0, corner_radius: float = 0.2,
                      height: float = 1.0, landmark_density: float = 60.0) -> Scene:
    """Three textured panel sides (side 3 near-textureless) plus a rear plate."""
    if side_length <= 0 or height <= 0:
        raise ValueError("panel dimensions must be positive")
    if corner_radius < 0 or 2 * corner_radius >= side_length:
        raise ValueError("corner radius must be non-negative and smaller than half a side")
    rng = np.random.default_rng([seed, 11])
    a = 0.5 * side_length
    flat = a - corner_radius
    densities = (0.9, 0.85, 0.05, 0.8)
    sides = []
    for k, name in enumerate(SIDE_NAMES):
        phi = 0.5 * np.pi * k
        n = (float(np.round(np.cos(phi), 15)), float(np.round(np.sin(phi), 15)), 0.0)
        sides.append(PanelSide(name, n, a, flat, 0.5 * height, densities[k]))

    markers = []
    mid = 1
    for k in (0, 1):
        for j, u in enumerate((-0.6 * flat, 0.0, 0.6 * flat)):
            z = (0.2 if j % 2 == 0 else -0.2) * height
            jitter = rng.uniform(-0.05, 0.05, size=2)
            markers.append(Marker(mid, _marker_pose(sides[k], u + jitter[0], z + jitter[1]), 0.15))
            mid += 1

    yaw = rng.uniform(-np.pi, np.pi)
    pos = np.array([4.0, 2.0, -10.0]) + rng.uniform(-0.5, 0.5, size=3)
    panel = FramedPose("odom", "panel", pos, quat_exp([0.0, 0.0, yaw]))

    # textured landmarks fixed on the surfaces, density proportional to texture
    pts, owner = [], []
    for k, s in enumerate(sides):
        area = 2 * flat * height
        n_pts = rng.poisson(landmark_density * s.texture_density * area)
        u = rng.uniform(-flat, flat, n_pts)
        z = rng.uniform(-0.5 * height, 0.5 * height, n_pts)
        n = np.asarray(s.normal)
        pts.append(n * a + np.outer(u, s.tangent) + np.outer(z, [0, 0, 1]))
        owner.append(np.full(n_pts, k))
    centers = np.array([[flat, flat], [-flat, flat], [-flat, -flat], [flat, -flat]])
    for j in range(4):
        dens = 0.5 * (densities[j] + densities[(j + 1) % 4])
        area = 0.5 * np.pi * corner_radius * height
        n_pts = rng.poisson(landmark_density * dens * area)
        ang = rng.uniform(0.5 * np.pi * j, 0.5 * np.pi * (j + 1), n_pts)
        z = rng.uniform(-0.5 * height, 0.5 * height, n_pts)
        pts.append(np.column_stack([centers[j, 0] + corner_radius * np.cos(ang),
                                    centers[j, 1] + corner_radius * np.sin(ang), z]))
        owner.append(np.full(n_pts, 4 + j))
    landmarks = np.concatenate(pts)
    landmark_side = np.concatenate(owner)
    landmarks.setflags(write=False)
    landmark_side.setflags(write=False)
    return Scene(seed, float(side_length), float(corner_radius), float(height), tuple(sides),
                 tuple(markers), panel, landmarks=landmarks, landmark_side=landmark_side)


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------

def footprint_distance(scene: Scene, xy) -> np.ndarray:
    """Horizontal distance from panel-frame points to the rounded-square footprint."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    f = scene.flat_half
    q = np.abs(xy) - f
    outer = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    return outer + np.minimum(np.max(q, axis=1), 0.0) - scene.corner_radius


def _loop_point(scene: Scene, standoff: float, s: float):
    """Position (panel frame xy) and outward normal at arc length ``s`` of the offset loop.

    The loop starts facing the middle of side 1 and runs counter-clockwise.
    """
    f = scene.flat_half
    rad = scene.corner_radius + standoff
    flat_len = 2 * f
    arc_len = 0.5 * np.pi * rad
    seg = flat_len + arc_len
    total = 4 * seg
    s = (s + f) % total  # start offset to the middle of side 1
    k = int(s // seg) % 4
    r = s - k * seg
    phi0 = 0.5 * np.pi * k
    n = np.array([np.cos(phi0), np.sin(phi0)])
    t = np.array([-n[1], n[0]])
    if r <= flat_len:
        xy = n * (scene.half_width + standoff) + t * (-f + r)
        return xy, n
    ang = phi0 + (r - flat_len) / rad
    c = scene.corner_centers()[k]
    nn = np.array([np.cos(ang), np.sin(ang)])
    return c + rad * nn, nn


def surface_samples(scene: Scene, spacing: float = 0.05) -> np.ndarray:
    """Panel-frame points on a regular grid over the lateral surface."""
    total = loop_length(scene, 0.0)
    ss = np.arange(0.0, total, spacing)
    zs = np.arange(-0.5 * scene.height + 0.5 * spacing, 0.5 * scene.height, spacing)
    xy = np.array([_loop_point(scene, 0.0, s)[0] for s in ss])
    return np.array([[x, y, z] for x, y in xy for z in zs])


def loop_length(scene: Scene, standoff: float) -> float:
    return 4 * (2 * scene.flat_half + 0.5 * np.pi * (scene.corner_radius + standoff))


def generate_trajectory(scene: Scene, standoff: float = 1.5, angular_rate: float = 2 * np.pi / 60,
                        duration: float = 60.0, rate: float = 10.0, depth: float = 0.0):
    """Ground-truth robot poses (odom <- robot) circling the panel at fixed standoff.

    ``angular_rate`` sets the revolution period ``2*pi/angular_rate``; speed along
    the loop is constant.  The robot x axis points at the panel.
    """
    if standoff <= 0 or rate <= 0:
        raise ValueError("standoff and rate must be positive")
    n = int(round(duration * rate))
    period = 2 * np.pi / angular_rate
    speed = loop_length(scene, standoff) / period
    out = []
    for i in range(n + 1):
        t = i / rate
        xy, nrm = _loop_point(scene, standoff, speed * t)
        yaw = np.arctan2(-nrm[1], -nrm[0])
        T_pr = FramedPose("panel", "robot", [xy[0], xy[1], depth], quat_exp([0, 0, yaw]))
        out.append((t, scene.panel_pose_gt @ T_pr))
    return out


def facing_side(scene: Scene, pose: FramedPose) -> str:
    """Which flat face the robot currently faces, or 'corner'."""
    p = scene.panel_pose_gt.inverse() @ pose
    x, y = p.position[:2]
    f = scene.flat_half
    if abs(y) <= f and x > f:
        return "side1"
    if abs(x) <= f and y > f:
        return "side2"
    if abs(y) <= f and x < -f:
        return "side3"
    if abs(x) <= f and y < -f:
        return "rear"
    return "corner"


def save_trajectory(scene: Scene, trajectory, path) -> None:
    doc = {"scene": scene.to_dict(),
           "trajectory": [[t] + list(p.as_tuple()) for t, p in trajectory]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_trajectory(path):
    doc = json.loads(Path(path).read_text())
    traj = [(row[0], FramedPose("odom", "robot", row[1:4], row[4:8])) for row in doc["trajectory"]]
    return doc["scene"], traj


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

@dataclass
class RayHits:
    t: np.ndarray          # (H, W) ray parameter (camera-frame depth since dir_z = 1); inf = miss
    surface: np.ndarray    # (H, W) surface id, 0-3 faces, 4-7 corners, -1 miss
    normal: np.ndarray     # (H, W, 3) panel-frame unit normal
    point: np.ndarray      # (H, W, 3) panel-frame hit point
    density: np.ndarray    # (H, W) texture density at hit
    dirs_cam: np.ndarray   # (H, W, 3)

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.t)


def camera_pose(scene: Scene, robot_pose: FramedPose) -> FramedPose:
    return robot_pose @ scene.camera_extrinsics


def cast_rays(scene: Scene, robot_pose: FramedPose) -> RayHits:
    cam = scene.camera
    T_pc = scene.panel_pose_gt.inverse() @ camera_pose(scene, robot_pose)
    dirs_cam = cam.ray_directions()
    d = dirs_cam.reshape(-1, 3) @ T_pc.rotation.T
    o = T_pc.position
    n_rays = len(d)
    best_t = np.full(n_rays, np.inf)
    surf = np.full(n_rays, -1)
    normal = np.zeros((n_rays, 3))
    hz = 0.5 * scene.height
    with np.errstate(divide="ignore", invalid="ignore"):
        for k, s in enumerate(scene.sides):
            n = np.asarray(s.normal)
            dn = d @ n
            t = (s.offset - o @ n) / dn
            p = o + t[:, None] * d
            u = p @ s.tangent
            ok = (dn < 0) & (t > 0) & (np.abs(u) <= s.u_extent) & (np.abs(p[:, 2]) <= hz)
            better = ok & (t < best_t)
            best_t[better] = t[better]
            surf[better] = k
            normal[better] = n
        r = scene.corner_radius
        if r > 0:
            for j, c in enumerate(scene.corner_centers()):
                oc = o[:2] - c
                dxy = d[:, :2]
                A = np.einsum("ij,ij->i", dxy, dxy)
                B = 2 * dxy @ oc
                C = oc @ oc - r * r
                disc = B * B - 4 * A * C
                sq = np.sqrt(np.maximum(disc, 0.0))
                t = (-B - sq) / (2 * A)
                p = o + t[:, None] * d
                rel = p[:, :2] - c
                ang = np.arctan2(rel[:, 1], rel[:, 0]) % (2 * np.pi)
                lo, hi = 0.5 * np.pi * j, 0.5 * np.pi * (j + 1)
                in_arc = (ang >= lo - 1e-12) & (ang <= hi + 1e-12)
                if j == 3:
                    in_arc |= ang <= 1e-12
                ok = (disc > 0) & (t > 0) & in_arc & (np.abs(p[:, 2]) <= hz)
                better = ok & (t < best_t)
                best_t[better] = t[better]
                surf[better] = 4 + j
                nr = np.zeros((n_rays, 3))
                nr[:, :2] = rel / r
                normal[better] = nr[better]
    point = o + np.where(np.isfinite(best_t), best_t, 0.0)[:, None] * d
    dens_table = np.array([s.texture_density for s in scene.sides]
                          + [0.5 * (scene.sides[j].texture_density
                                    + scene.sides[(j + 1) % 4].texture_density) for j in range(4)]
                          + [0.0])
    density = dens_table[surf]
    H, W = cam.height, cam.width
    return RayHits(best_t.reshape(H, W), surf.reshape(H, W), normal.reshape(H, W, 3),
                   point.reshape(H, W, 3), density.reshape(H, W), dirs_cam)


# ---------------------------------------------------------------------------
# depth rendering
# ---------------------------------------------------------------------------

class PointLabel(int, Enum):
    SURFACE = 0
    COMET = 1
    DROPOUT = 2


@dataclass(frozen=True)
class DepthProfile:
    name: str
    depth_noise_sigma: float = 0.0
    coverage: float = 1.0
    comet_rate: float = 0.0
    boundary_smoothing: float = 0.0
    texture_limited: bool = False

    def __post_init__(self):
        for v in (self.coverage, self.comet_rate):
            if not 0.0 <= v <= 1.0:
                raise ValueError("profile fractions must lie in [0, 1]")
        if self.depth_noise_sigma < 0 or self.boundary_smoothing < 0:
            raise ValueError("profile sigma and smoothing must be non-negative")

    def with_(self, **kw) -> "DepthProfile":
        d = asdict(self)
        d.update(kw)
        return DepthProfile(**d)


PROFILES = {
    "reference": DepthProfile("reference"),
    "accurate_sparse": DepthProfile("accurate_sparse", 0.008, 0.58, 0.02, 0.0, True),
    "complete_smooth": DepthProfile("complete_smooth", 0.020, 0.94, 0.08, 0.030, False),
}


@dataclass
class DepthFrame:
    """Per-ray render result; rays that miss the panel carry no entry."""

    points: np.ndarray       # (N, 3) camera frame, NaN for dropouts
    labels: np.ndarray       # (N,) PointLabel values
    true_points: np.ndarray  # (N, 3) noiseless surface point along the same ray
    pixels: np.ndarray       # (N, 2) (row, col)
    boundary: np.ndarray     # (N,) ray lies in the discontinuity band
    free_dirs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # unit rays with no surface in range

    def cloud(self) -> np.ndarray:
        return self.points[self.labels != PointLabel.DROPOUT]

    def cloud_labels(self) -> np.ndarray:
        return self.labels[self.labels != PointLabel.DROPOUT]

    def coverage(self) -> float:
        return float(np.mean(self.labels != PointLabel.DROPOUT)) if len(self.labels) else 0.0

    def to_rows(self) -> str:
        keep = self.labels != PointLabel.DROPOUT
        lines = [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {PointLabel(int(l)).name.lower()}"
                 for p, l in zip(self.points[keep], self.labels[keep])]
        return "\n".join(lines) + ("\n" if lines else "")


def _smooth_gaussian_field(rng, shape, sigma_px: float) -> np.ndarray:
    """Spatially correlated field with standard-normal marginals."""
    white = rng.standard_normal(shape)
    if sigma_px <= 0:
        return white
    f = gaussian_filter(white, sigma_px, mode="wrap")
    impulse = np.zeros(shape)
    impulse[0, 0] = 1.0
    k = gaussian_filter(impulse, sigma_px, mode="wrap")
    return f / np.sqrt(np.sum(k * k))


def _neighbour_gap(depth: np.ndarray, hit: np.ndarray, far: float, band: int, jump: float):
    """Largest depth gap to any pixel within ``band`` (Chebyshev) of each pixel."""
    H, W = depth.shape
    d = np.where(hit, depth, far)
    pad = np.pad(d, band, mode="edge")
    gap = np.zeros_like(d)
    for dy in range(-band, band + 1):
        for dx in range(-band, band + 1):
            if dx == 0 and dy == 0:
                continue
            nb = pad[band + dy:band + dy + H, band + dx:band + dx + W]
            gap = np.maximum(gap, nb - d)
    gap = np.where(gap > jump, gap, 0.0)
    return gap


def render_depth(scene: Scene, pose: FramedPose, profile: DepthProfile, seed: int,
                 comet_band: int = 2, jump: float = 0.3) -> DepthFrame:
    """Ray-cast the panel from the camera on ``pose`` (odom <- robot) with sensor artefacts."""
    rays = cast_rays(scene, pose)
    cam = scene.camera
    rng = np.random.default_rng([seed, 23])
    shape = rays.t.shape
    hit = rays.hit
    depth = np.where(hit, rays.t, np.nan)

    # dropouts: smooth hole field thresholded at the per-pixel keep probability
    keep_p = np.full(shape, profile.coverage)
    if profile.texture_limited:
        keep_p = keep_p * rays.density
    hole_field = ndtr(_smooth_gaussian_field(rng, shape, 2.0))
    kept = hit & (hole_field < keep_p)

    gap = _neighbour_gap(rays.t, hit, cam.max_range, comet_band, jump)
    boundary = hit & (gap > 0)

    noisy = depth.copy()
    if profile.boundary_smoothing > 0:
        foot = np.nanmedian(depth[hit]) / cam.fx if hit.any() else 1.0
        b = max(1, int(np.ceil(profile.boundary_smoothing / foot)))
        band = hit & (_neighbour_gap(rays.t, hit, cam.max_range, b, jump) > 0)
        w = hit.astype(float)
        num = gaussian_filter(np.where(hit, depth, 0.0), b, mode="nearest")
        den = gaussian_filter(w, b, mode="nearest")
        with np.errstate(invalid="ignore", divide="ignore"):
            smooth = num / den
        noisy = np.where(band, smooth, noisy)
    noisy = noisy + profile.depth_noise_sigma * rng.standard_normal(shape)

    comet_field = ndtr(_smooth_gaussian_field(rng, shape, 1.5))
    disp_field = ndtr(_smooth_gaussian_field(rng, shape, 3.0))
    comet = kept & boundary & (comet_field < profile.comet_rate)
    frac = 0.1 + 0.4 * disp_field
    noisy = np.where(comet, noisy + frac * gap, noisy)

    labels = np.full(shape, PointLabel.DROPOUT, dtype=int)
    labels[kept] = PointLabel.SURFACE
    labels[comet] = PointLabel.COMET
    pts = rays.dirs_cam * noisy[..., None]
    pts[~kept] = np.nan
    true_pts = rays.dirs_cam * depth[..., None]
    rows, cols = np.nonzero(hit)
    free = rays.dirs_cam[~hit]
    free = free / np.linalg.norm(free, axis=1, keepdims=True)
    return DepthFrame(pts[hit], labels[hit], true_pts[hit], np.column_stack([rows, cols]),
                      boundary[hit], free)


def distance_to_surface(scene: Scene, pts_panel) -> np.ndarray:
    """Unsigned distance from panel-frame points to the panel's lateral surface."""
    pts = np.atleast_2d(np.asarray(pts_panel, dtype=float))
    lateral = np.abs(footprint_distance(scene, pts[:, :2]))
    above = np.maximum(np.abs(pts[:, 2]) - 0.5 * scene.height, 0.0)
    return np.hypot(lateral, above)


# ---------------------------------------------------------------------------
# image proxy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageProxy:
    width: int
    height: int
    intensities: np.ndarray
    trackable_feature_count: int
    timestamp: float = 0.0


def _value_noise(seed: int, key: np.ndarray) -> np.ndarray:
    """Deterministic per-cell pseudo random values in [-1, 1] from integer cell keys."""
    h = (key.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ np.uint64(seed * 0x632BE5AB + 1)
    h ^= h >> np.uint64(29)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(32)
    return (h % np.uint64(1 << 20)).astype(float) / float(1 << 19) - 1.0


def surface_texture(scene: Scene, surface: np.ndarray, point: np.ndarray, cell: float = 0.04):
    """Albedo pattern in [-1, 1] attached to panel surface coordinates."""
    ang = np.arctan2(point[..., 1], point[..., 0])
    coord = np.where(surface < 4, point[..., 0] * 0.7 + point[..., 1] * 1.3,
                     ang * scene.corner_radius)
    iu = np.floor(coord / cell).astype(np.int64) + (1 << 16)
    iz = np.floor(point[..., 2] / cell).astype(np.int64) + (1 << 16)
    key = (surface.astype(np.int64) + 2) * (1 << 40) + iu * (1 << 20) + iz
    with np.errstate(over="ignore"):
        return _value_noise(scene.seed, key)


def render_image_proxy(scene: Scene, pose: FramedPose, seed: int, timestamp: float = 0.0,
                       features_per_m2: float = 60.0, sensor_noise: float = 0.01) -> ImageProxy:
    rays = cast_rays(scene, pose)
    cam = scene.camera
    rng = np.random.default_rng([seed, 37])
    hit = rays.hit
    T_pc = scene.panel_pose_gt.inverse() @ camera_pose(scene, pose)
    view = T_pc.position - rays.point
    view /= np.linalg.norm(view, axis=-1, keepdims=True) + 1e-300
    cos_inc = np.clip(np.einsum("hwk,hwk->hw", rays.normal, view), 0.0, 1.0)
    tex = surface_texture(scene, rays.surface, rays.point)
    albedo = 0.5 + 0.45 * rays.density * tex
    img = np.where(hit, 0.12 + 0.7 * cos_inc * albedo, 0.1)
    img = np.clip(img + sensor_noise * rng.standard_normal(img.shape), 0.0, 1.0)

    # visible textured area, m^2 per pixel = depth^2 / (f^2 cos(incidence))
    with np.errstate(divide="ignore", invalid="ignore"):
        range2 = np.where(hit, rays.t ** 2 * np.sum(rays.dirs_cam ** 2, axis=-1), 0.0)
        area = np.where(hit, range2 / (cam.fx ** 2) / np.maximum(cos_inc, 0.05), 0.0)
    feats = int(np.floor(features_per_m2 * np.sum(area * rays.density)))
    feats = min(feats, cam.width * cam.height)
    return ImageProxy(cam.width, cam.height, img, feats, timestamp)


# ---------------------------------------------------------------------------
# markers
# ---------------------------------------------------------------------------

def marker_incidence(scene: Scene, pose: FramedPose, marker: Marker):
    """(T^C_M exact, incidence angle rad, in-frustum flag) for a robot pose."""
    T_oc = camera_pose(scene, pose)
    T_cm = T_oc.inverse() @ scene.panel_pose_gt @ marker.pose.retagged("panel", "marker")
    p = T_cm.position
    to_cam = -p / np.linalg.norm(p)
    z_axis = T_cm.rotation[:, 2]
    inc = float(np.arccos(np.clip(z_axis @ to_cam, -1.0, 1.0)))
    in_view = False
    if p[2] > 0.05 and np.linalg.norm(p) < scene.camera.max_range:
        u, v = scene.camera.project(p)
        in_view = (0 <= u <= scene.camera.width - 1) and (0 <= v <= scene.camera.height - 1)
    return T_cm, inc, in_view


def detect_markers(scene: Scene, pose_gt: FramedPose, noise_sigma_pos: float = 0.0,
                   noise_sigma_rot: float = 0.0, seed: int = 0, max_incidence_deg: float = 75.0):
    """Visible markers with Gaussian pose noise inflated by ``1 + incidence/45deg``."""
    rng = np.random.default_rng([seed, 41])
    out = []
    for m in scene.markers:
        T_cm, inc, in_view = marker_incidence(scene, pose_gt, m)
        eps_p = rng.standard_normal(3)
        eps_r = rng.standard_normal(3)
        if not in_view or inc > np.radians(max_incidence_deg):
            continue
        scale = 1.0 + np.degrees(inc) / 45.0
        pos = T_cm.position + noise_sigma_pos * scale * eps_p
        q = qmul(T_cm.orientation, quat_exp(noise_sigma_rot * scale * eps_r))
        out.append((m.marker_id, FramedPose("camera", "marker", pos, q)))
    return out
