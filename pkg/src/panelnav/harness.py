"""Experiment runner: config, stage-1 mapping, plane evaluation, fusion runs, reports."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ekf import SUMMARY_HEADER, TRAJECTORY_HEADER, EkfConfig, MetricsReport
from .fusion import (FusionConfig, FusionResult, SensorConfig, estimate_panel,
                     plane_rotation_measurement, run_fusion, simulate_stream)
from .geometry import qconj, qmul, quat_log
from .iqa import CSV_HEADER as IQA_HEADER
from .iqa import GateConfig, score_image, select_modality
from .markers import MarkerRegistry
from .planes import ExtractionParams, extract_planes
from .registration import MatchThresholds
from .scene import PROFILES, build_panel_scene, generate_trajectory, render_depth, surface_samples
from .voxel_map import OccupancyMap, build_index, filter_cloud, integrate_cloud

MODES = ("stage1_map", "plane_eval", "iqa_trace", "fusion_all", "fusion_adaptive", "TL1", "TL2", "TL3")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    side_length: float = 3.0
    corner_radius: float = 0.2
    height: float = 1.0
    landmark_density: float = 60.0


@dataclass(frozen=True)
class TrajectorySpec:
    standoff: float = 1.5
    period: float = 60.0
    duration: float = 60.0
    rate: float = 10.0
    depth: float = 0.0


@dataclass(frozen=True)
class MapSpec:
    resolution: float = 0.1
    p_hit: float = 0.7
    p_miss: float = 0.4
    clamp_min: float = -2.0
    clamp_max: float = 3.5
    filter_radius: float = 0.15
    clear_no_return: bool = False  # rays that see nothing within range clear the voxels they cross


@dataclass(frozen=True)
class FusionSpec:
    use_map: bool = False
    frame_stride: int = 1  # plane evaluation only
    panel_min_samples: int = 10
    panel_max_spread: float = 0.1  # metres, RMS of panel position samples
    max_plane_rotation: float = 0.5  # rad per frame pair


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    mode: str = "fusion_adaptive"
    output_dir: str = "out"
    scene: SceneSpec = field(default_factory=SceneSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    profile: str = "complete_smooth"
    profiles: tuple = ("reference", "accurate_sparse", "complete_smooth")
    profile_overrides: dict = field(default_factory=dict)
    noise: SensorConfig = field(default_factory=SensorConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    ekf: EkfConfig = field(default_factory=EkfConfig)
    map: MapSpec = field(default_factory=MapSpec)
    fusion: FusionSpec = field(default_factory=FusionSpec)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        for p in (self.profile, *self.profiles):
            if p not in PROFILES:
                raise ConfigError(f"unknown depth profile {p!r}")
        object.__setattr__(self, "profiles", tuple(self.profiles))
        object.__setattr__(self, "profile_overrides", dict(self.profile_overrides))

    def with_(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def depth_profile(self, profile: str | None = None):
        prof = PROFILES[profile or self.profile]
        return prof.with_(**self.profile_overrides) if self.profile_overrides else prof

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    extra = sorted(set(data) - set(known))
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(extra)}")
    kw = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config")


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# shared setup
# ---------------------------------------------------------------------------

@dataclass
class Context:
    cfg: ExperimentConfig
    scene: object
    trajectory: list
    frames: list
    registry: MarkerRegistry
    panel: object
    plane_cache: dict = field(default_factory=dict)


def prepare(cfg: ExperimentConfig, with_depth: bool = True) -> Context:
    sc = cfg.scene
    scene = build_panel_scene(cfg.seed, sc.side_length, sc.corner_radius, sc.height, sc.landmark_density)
    tr = cfg.trajectory
    traj = generate_trajectory(scene, tr.standoff, 2 * np.pi / tr.period, tr.duration, tr.rate, tr.depth)
    frames = simulate_stream(scene, traj, cfg.noise, cfg.seed, with_depth, cfg.depth_profile())
    registry = MarkerRegistry.from_scene(scene)
    panel = estimate_panel(frames, registry, traj[0][1], cfg.fusion.panel_min_samples,
                           cfg.fusion.panel_max_spread)
    return Context(cfg, scene, traj, frames, registry, panel)


def fusion_config(cfg: ExperimentConfig, **kw) -> FusionConfig:
    return FusionConfig(gate=cfg.gate, ekf=cfg.ekf, filter_radius=cfg.map.filter_radius,
                        depth_sigma=max(cfg.depth_profile().depth_noise_sigma, 0.005),
                        max_plane_rotation=cfg.fusion.max_plane_rotation, **kw)


def new_map(cfg: ExperimentConfig) -> OccupancyMap:
    m = cfg.map
    return OccupancyMap(resolution=m.resolution, p_hit=m.p_hit, p_miss=m.p_miss,
                        clamp_min=m.clamp_min, clamp_max=m.clamp_max)


@dataclass
class RunReport:
    name: str
    metrics: MetricsReport | None = None
    plane_rows: list = field(default_factory=list)
    map_stats: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    trajectory_rows: list = field(default_factory=list)
    iqa_rows: list = field(default_factory=list)
    positions: np.ndarray | None = None
    truth_positions: np.ndarray | None = None
    result: FusionResult | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def baseline_poses(ctx: Context) -> list:
    """Marker-odometry localization (dead reckoning + markers) used to build the map."""
    res = run_fusion(ctx.frames, ctx.registry, ctx.panel, fusion_config(ctx.cfg, use_vo=False))
    return [s.pose for s in res.states]


def build_stage1_map(ctx: Context, clouds=None, poses=None) -> OccupancyMap:
    """Occupancy map from (camera cloud, free ray directions) pairs placed at ``poses``."""
    poses = poses if poses is not None else baseline_poses(ctx)
    clouds = clouds if clouds is not None else [(f.depth, f.free_dirs) for f in ctx.frames]
    m = new_map(ctx.cfg)
    T_rc = ctx.registry.T_rc
    reach = ctx.scene.camera.max_range
    for (cloud, free), pose in zip(clouds, poses):
        T_oc = pose @ T_rc
        ends = T_oc.transform_points(free * reach) if ctx.cfg.map.clear_no_return and len(free) else None
        if len(cloud) == 0 and ends is None:
            continue
        integrate_cloud(m, T_oc.transform_points(cloud), T_oc.position, ends)
    return m


def surface_coverage(m: OccupancyMap, scene) -> float:
    pts = scene.panel_pose_gt.transform_points(surface_samples(scene, 0.5 * m.resolution))
    keys = np.unique(m.voxel_index(pts), axis=0)
    occ = [m.probability(m.voxel_center(k)) > m.occupied_threshold for k in keys]
    return float(np.mean(occ)) if occ else 0.0


def run_stage1(cfg: ExperimentConfig, ctx: Context | None = None, out_dir=None):
    t0 = time.perf_counter()
    ctx = ctx or prepare(cfg)
    m = build_stage1_map(ctx) if cfg.trajectory.duration > 0 else new_map(cfg)
    stats = {"occupied_voxels": len(m.occupied_centers()), "stored_voxels": len(m.log_odds),
             "surface_coverage": surface_coverage(m, ctx.scene)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        m.save(out / "stage1_map.txt")
    return m, RunReport("stage1_map", map_stats=stats, timings={"stage1": time.perf_counter() - t0})


# ---------------------------------------------------------------------------
# plane evaluation
# ---------------------------------------------------------------------------

PLANE_HEADER = ("run,profile,filtered,frames,accuracy_mean,coverage_mean,planes_total,planes_per_frame,"
                "holes_total,ori_err_mean_deg,ori_err_std_deg,registered")


def depth_correct(measured, true_pts, fx: float) -> np.ndarray:
    """|depth error| < max(3 pixel footprints, 5% of true depth), in camera depth."""
    z_true = true_pts[:, 2]
    tol = np.maximum(3.0 * z_true / fx, 0.05 * z_true)
    return np.abs(measured[:, 2] - z_true) < tol


def plane_eval_rows(ctx: Context, profile: str, m: OccupancyMap | None, poses, stride: int = 1):
    """Per-frame plane statistics for one profile; ``m`` None means unfiltered."""
    cfg = ctx.cfg
    prof = cfg.depth_profile(profile)
    params = ExtractionParams.for_noise(prof.depth_noise_sigma)
    index = build_index(m) if m is not None else None
    T_rc = ctx.registry.T_rc
    fx = ctx.scene.camera.fx
    acc, cov, nplanes, holes, errs = [], [], [], [], []
    prev = None
    for k in range(0, len(ctx.frames), stride):
        fr = ctx.frames[k]
        d = render_depth(ctx.scene, fr.truth, prof, cfg.seed * 100_003 + k)
        ok = np.all(np.isfinite(d.points), axis=1)
        pts, true_pts = d.points[ok], d.true_points[ok]
        if index is not None and len(pts):
            T_oc = poses[k] @ T_rc
            _, keep, _ = filter_cloud(index, T_oc.transform_points(pts), cfg.map.filter_radius)
            pts, true_pts = pts[keep], true_pts[keep]
        n_rays = len(d.points)
        cov.append(len(pts) / n_rays if n_rays else 0.0)
        if len(pts):
            acc.append(float(np.mean(depth_correct(pts, true_pts, fx))))
        segs, _ = extract_planes(pts, params)
        nplanes.append(len(segs))
        holes.append(sum(s.hole_count for s in segs))
        if prev is not None:
            meas = plane_rotation_measurement(prev[1], segs, T_rc, prev[0].t, fr.t, MatchThresholds(), 0.0,
                                              cfg.fusion.max_plane_rotation)
            if meas is not None:
                true_rel = qmul(qconj(prev[0].truth.orientation), fr.truth.orientation)
                r = quat_log(qmul(qconj(true_rel), meas.q))
                errs.append(float(np.linalg.norm(meas.observable.T @ r)))
        prev = (fr, segs)
    errs_deg = np.degrees(errs) if errs else np.array([np.nan])
    return {"profile": profile, "filtered": m is not None, "frames": len(nplanes),
            "accuracy_mean": float(np.mean(acc)) if acc else float("nan"),
            "coverage_mean": float(np.mean(cov)) if cov else float("nan"),
            "planes_total": int(np.sum(nplanes)), "planes_per_frame": float(np.mean(nplanes)),
            "holes_total": int(np.sum(holes)), "ori_err_mean_deg": float(np.mean(errs_deg)),
            "ori_err_std_deg": float(np.std(errs_deg)), "registered": len(errs)}


def _clouds_for(ctx: Context, profile: str):
    prof = ctx.cfg.depth_profile(profile)
    out = []
    for k, fr in enumerate(ctx.frames):
        d = render_depth(ctx.scene, fr.truth, prof, ctx.cfg.seed * 100_003 + k)
        ok = np.all(np.isfinite(d.points), axis=1)
        out.append((d.points[ok], d.free_dirs))
    return out


def run_plane_eval(cfg: ExperimentConfig, ctx: Context | None = None, filtered: bool = True):
    """Rows per (profile x {unfiltered, filtered}); filtered rows use a stage-1 map per profile."""
    t0 = time.perf_counter()
    ctx = ctx or prepare(cfg, with_depth=False)
    poses = baseline_poses(ctx)
    rows = []
    for profile in cfg.profiles:
        rows.append(plane_eval_rows(ctx, profile, None, poses, cfg.fusion.frame_stride))
        if filtered:
            m = build_stage1_map(ctx, _clouds_for(ctx, profile), poses)
            rows.append(plane_eval_rows(ctx, profile, m, poses, cfg.fusion.frame_stride))
    return RunReport("plane_eval", plane_rows=rows, timings={"plane_eval": time.perf_counter() - t0})


# ---------------------------------------------------------------------------
# IQA and fusion runs
# ---------------------------------------------------------------------------

def run_iqa_trace(cfg: ExperimentConfig, ctx: Context | None = None) -> RunReport:
    ctx = ctx or prepare(cfg, with_depth=False)
    rows, prev = [], None
    for fr in ctx.frames:
        sc = score_image(fr.image, cfg.gate)
        prev = select_modality(sc, cfg.gate, prev)
        rows.append(sc.row(prev))
    return RunReport("iqa_trace", iqa_rows=rows)


def _fusion_report(name: str, res: FusionResult, markers_only: bool, t0: float) -> RunReport:
    return RunReport(name, metrics=res.report(markers_only), trajectory_rows=res.trajectory_rows(),
                     iqa_rows=[sc.row(c) for sc, c in zip(res.iqa, res.choices)],
                     positions=np.array([s.position for s in res.states]),
                     truth_positions=np.array([g.position for g in res.truths]),
                     timings={name: time.perf_counter() - t0}, result=res)


def _map_index(ctx: Context):
    if not ctx.cfg.fusion.use_map:
        return None
    return build_index(build_stage1_map(ctx))


def run_fusion_mode(cfg: ExperimentConfig, mode: str, ctx: Context | None = None, index=None) -> RunReport:
    ctx = ctx or prepare(cfg)
    index = index if index is not None else _map_index(ctx)
    t0 = time.perf_counter()
    res = run_fusion(ctx.frames, ctx.registry, ctx.panel, fusion_config(cfg, mode=mode), index,
                     ctx.plane_cache)
    return _fusion_report("EKF-all" if mode == "all" else "EKF-adaptive", res, False, t0)


def run_fusion_compare(cfg: ExperimentConfig, ctx: Context | None = None):
    """Both arms on one event stream; the adaptive arm also yields the IQA trace."""
    ctx = ctx or prepare(cfg)
    index = _map_index(ctx)
    reports = [run_fusion_mode(cfg, "all", ctx, index), run_fusion_mode(cfg, "adaptive", ctx, index)]
    return reports


def run_TLi(cfg: ExperimentConfig, i: int, ctx: Context | None = None, index=None) -> RunReport:  # noqa: N802
    """T_L1 dead reckoning + markers; T_L2 adds gated VO; T_L3 is T_L2 without markers.

    Errors are evaluated only at frames with marker detections.
    """
    if i not in (1, 2, 3):
        raise ConfigError(f"TL index must be 1, 2 or 3, got {i}")
    ctx = ctx or prepare(cfg)
    index = index if index is not None else _map_index(ctx)
    kw = {1: dict(use_vo=False), 2: dict(), 3: dict(use_markers=False)}[i]
    t0 = time.perf_counter()
    res = run_fusion(ctx.frames, ctx.registry, ctx.panel, fusion_config(cfg, **kw), index, ctx.plane_cache)
    return _fusion_report(f"TL{i}", res, True, t0)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _svg_polyline(xs, ys, x0, x1, y0, y1, w, h, color):
    sx = w / (x1 - x0) if x1 > x0 else 1.0
    sy = h / (y1 - y0) if y1 > y0 else 1.0
    pts = " ".join(f"{(x - x0) * sx:.2f},{h - (y - y0) * sy:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>'


def error_svg(rep: RunReport) -> str:
    m = rep.metrics
    w, h = 600, 200
    y1 = max(float(np.max(m.position_error)) if len(m.position_error) else 1.0, 1e-6)
    t0, t1 = (float(m.times[0]), float(m.times[-1])) if len(m.times) else (0.0, 1.0)
    body = _svg_polyline(m.times, m.position_error, t0, t1, 0.0, y1, w, h, "#1f77b4")
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">'
            f'<title>{rep.name} position error (m) vs time (s), max {y1:.3f}</title>{body}</svg>\n')


def topdown_svg(rep: RunReport) -> str:
    P, G = rep.positions, rep.truth_positions
    w = h = 400
    allp = np.vstack([P[:, :2], G[:, :2]])
    lo, hi = allp.min(axis=0) - 0.5, allp.max(axis=0) + 0.5
    span = float(max(hi - lo))
    parts = [_svg_polyline(G[:, 0], G[:, 1], lo[0], lo[0] + span, lo[1], lo[1] + span, w, h, "#999999"),
             _svg_polyline(P[:, 0], P[:, 1], lo[0], lo[0] + span, lo[1], lo[1] + span, w, h, "#d62728")]
    err = np.linalg.norm(P - G, axis=1)
    for k in range(0, len(P), 10):
        x = (P[k, 0] - lo[0]) * w / span
        y = h - (P[k, 1] - lo[1]) * h / span
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{1 + 20 * err[k]:.2f}" fill="none" stroke="#d62728"/>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">'
            f'<title>{rep.name} top-down trajectory, glyph radius scales with error</title>'
            + "".join(parts) + "</svg>\n")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def emit_report(reports, out_dir) -> list:
    """Write CSV tables and SVG plots; returns the written paths in order."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to emit")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []

    def write(name: str, text: str):
        path = out / name
        try:
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)

    runs = [r for r in reports if r.metrics is not None]
    if runs:
        write("summary.csv", "\n".join([SUMMARY_HEADER] + [r.metrics.summary_row(r.name) for r in runs]) + "\n")
    for r in runs:
        write(f"{r.name}_trajectory.csv", "\n".join([TRAJECTORY_HEADER] + r.trajectory_rows) + "\n")
        counts = r.metrics.modality_counts
        write(f"{r.name}_modalities.csv",
              "modality,count\n" + "".join(f"{k},{counts[k]}\n" for k in sorted(counts)))
        if r.positions is not None:
            write(f"{r.name}_error.svg", error_svg(r))
            write(f"{r.name}_topdown.svg", topdown_svg(r))
    for r in reports:
        if r.iqa_rows:
            write(f"{r.name}_iqa.csv", "\n".join([IQA_HEADER] + r.iqa_rows) + "\n")
        if r.plane_rows:
            lines = [PLANE_HEADER]
            for row in r.plane_rows:
                lines.append(",".join([r.name] + [_fmt(row[k]) for k in PLANE_HEADER.split(",")[1:]]))
            write(f"{r.name}.csv", "\n".join(lines) + "\n")
        if r.map_stats:
            write(f"{r.name}_stats.csv", "stat,value\n" + "".join(
                f"{k},{_fmt(r.map_stats[k])}\n" for k in sorted(r.map_stats)))
    timings = {k: round(v, 3) for r in reports for k, v in r.timings.items()}
    if timings:
        write("timings.json", json.dumps(timings, indent=1, sort_keys=True) + "\n")
    return written


def run_mode(cfg: ExperimentConfig, out_dir=None) -> list:
    """Dispatch ``cfg.mode`` and emit its outputs; returns the reports."""
    out_dir = Path(out_dir or cfg.output_dir)
    mode = cfg.mode
    if mode == "stage1_map":
        _, rep = run_stage1(cfg, out_dir=out_dir)
        reports = [rep]
    elif mode == "plane_eval":
        reports = [run_plane_eval(cfg)]
    elif mode == "iqa_trace":
        reports = [run_iqa_trace(cfg)]
    elif mode == "fusion_all":
        reports = [run_fusion_mode(cfg, "all")]
    elif mode == "fusion_adaptive":
        reports = [run_fusion_mode(cfg, "adaptive")]
    else:
        reports = [run_TLi(cfg, int(mode[-1]))]
    emit_report(reports, out_dir)
    return reports
