"""Error-state EKF over (position, orientation, velocity) with relative-measurement history."""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .geometry import (FramedPose, PoseWithCovariance, euler_rate_to_body, geodesic_distance, qconj,
                       qmul, qnormalize, quat_exp, quat_log, quat_to_euler, quat_to_matrix, skew,
                       twist_exp)

log = logging.getLogger(__name__)


class TimeOrderError(ValueError):
    pass


class MeasurementError(ValueError):
    pass


def _check_psd(C, name: str, tol: float = 1e-9) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if not np.all(np.isfinite(C)) or not np.allclose(C, C.T, atol=1e-9):
        raise MeasurementError(f"{name} covariance is not finite and symmetric")
    if np.linalg.eigvalsh(0.5 * (C + C.T)).min() < -tol:
        raise MeasurementError(f"{name} covariance is not positive semi-definite")
    return 0.5 * (C + C.T)


# ---------------------------------------------------------------------------
# state and measurements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterState:
    """Nominal pose/velocity plus error-state covariance ordered (dp, dtheta, dv).

    ``dp`` and ``dv`` live in the odom frame; ``dtheta`` is right-multiplied
    (body frame): ``q_true = q * exp(dtheta)``.
    """

    position: np.ndarray
    orientation: np.ndarray
    velocity: np.ndarray
    covariance: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        for name, shape in (("position", (3,)), ("orientation", (4,)), ("velocity", (3,)),
                            ("covariance", (9, 9))):
            a = np.array(getattr(self, name), dtype=float).reshape(shape)
            if name == "orientation":
                a = qnormalize(a)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def initial(cls, pose: FramedPose, covariance=None, timestamp: float = 0.0) -> "FilterState":
        P = np.eye(9) * 1e-4 if covariance is None else covariance
        return cls(pose.position, pose.orientation, np.zeros(3), P, timestamp)

    @property
    def pose(self) -> FramedPose:
        return FramedPose("odom", "robot", self.position, self.orientation)


@dataclass(frozen=True)
class DeadReckonTwist:
    """Body-frame linear and angular velocity; covariance is a noise density (per second)."""

    linear: np.ndarray
    angular: np.ndarray
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))


@dataclass(frozen=True)
class MarkerPose:
    measurement: PoseWithCovariance  # covariance ordered x, y, z, roll, pitch, yaw


@dataclass(frozen=True)
class PlaneRotation:
    """Robot rotation from ``t_prev`` to ``t_curr`` (``q_prev^-1 q_curr``) with body-tangent covariance."""

    q: np.ndarray
    covariance: np.ndarray
    t_prev: float
    t_curr: float
    observable: np.ndarray | None = None  # 3xk basis of observable axes; None = all


@dataclass(frozen=True)
class FeatureDelta:
    """Robot pose at ``t_curr`` in the robot frame at ``t_prev``.

    Covariance ordered (translation in the previous frame, rotation in the current body frame).
    """

    delta: FramedPose
    covariance: np.ndarray
    t_prev: float
    t_curr: float


@dataclass(frozen=True)
class MeasurementEvent:
    timestamp: float
    payload: object
    stream: str = ""


@dataclass(frozen=True)
class EkfConfig:
    q_p: float = 1e-4
    q_theta: float = 1e-4
    q_v: float = 1e-3
    history_seconds: float = 5.0
    time_tolerance: float = 1e-6
    null_variance: float = 1e6
    # chi-square probability above which an innovation is rejected; None applies everything
    innovation_gate: float | None = None

    def process_noise(self, dt: float) -> np.ndarray:
        return np.diag([self.q_p] * 3 + [self.q_theta] * 3 + [self.q_v] * 3) * dt


# ---------------------------------------------------------------------------
# pure operations
# ---------------------------------------------------------------------------

def _propagate(state: FilterState, twist: DeadReckonTwist, dt: float, cfg: EkfConfig):
    """Propagated state and error-state transition matrix."""
    if dt < 0:
        raise TimeOrderError(f"negative time step {dt}")
    R = quat_to_matrix(state.orientation)
    dp, dq = twist_exp(twist.linear, twist.angular, dt)
    q = qnormalize(qmul(state.orientation, dq))
    p = state.position + R @ dp
    R_new = quat_to_matrix(q)
    dR = quat_to_matrix(dq)
    F = np.eye(9)
    F[:3, 3:6] = -R @ skew(dp)
    F[3:6, 3:6] = dR.T
    G = np.zeros((9, 6))
    G[:3, :3] = R * dt
    G[3:6, 3:6] = np.eye(3) * dt
    Q = cfg.process_noise(dt)
    if dt > 0:
        # twist covariance is a density: per-step velocity noise variance is C / dt
        Q = Q + G @ (np.asarray(twist.covariance) / dt) @ G.T
    P = F @ state.covariance @ F.T + Q
    out = FilterState(p, q, R_new @ np.asarray(twist.linear, dtype=float), 0.5 * (P + P.T),
                      state.timestamp + dt)
    return out, F


def predict(state: FilterState, twist: DeadReckonTwist, dt: float,
            cfg: EkfConfig | None = None) -> FilterState:
    """Constant-twist propagation over ``dt`` with process noise ``diag(q_p, q_theta, q_v) dt``."""
    return _propagate(state, twist, dt, cfg or EkfConfig())[0]


def _inject(state: FilterState, dx, P, timestamp=None) -> FilterState:
    q = qnormalize(qmul(state.orientation, quat_exp(dx[3:6])))
    # covariance reset for the re-centred attitude error
    G = np.eye(9)
    G[3:6, 3:6] = np.eye(3) - 0.5 * skew(dx[3:6])
    P = G @ P @ G.T
    return FilterState(state.position + dx[:3], q, state.velocity + dx[6:], 0.5 * (P + P.T),
                       state.timestamp if timestamp is None else timestamp)


def _joseph(P, K, H, Rm):
    I_KH = np.eye(P.shape[0]) - K @ H
    out = I_KH @ P @ I_KH.T + K @ Rm @ K.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class UpdateResult:
    state: FilterState
    nis: float
    dof: int
    gain: np.ndarray


def pose_measurement_covariance(m: PoseWithCovariance) -> np.ndarray:
    """Euler-ordered pose covariance to (position, body rotation vector)."""
    C = _check_psd(m.covariance, "marker pose")
    E = euler_rate_to_body(quat_to_euler(m.pose.orientation))
    M = np.eye(6)
    M[3:, 3:] = E
    out = M @ C @ M.T
    return 0.5 * (out + out.T)


def _update_pose(state: FilterState, m: MarkerPose) -> UpdateResult:
    meas = m.measurement
    Rm = pose_measurement_covariance(meas)
    r = np.concatenate([meas.pose.position - state.position,
                        quat_log(qmul(qconj(state.orientation), meas.pose.orientation))])
    H = np.zeros((6, 9))
    H[:, :6] = np.eye(6)
    P = state.covariance
    S = H @ P @ H.T + Rm
    S = 0.5 * (S + S.T)
    K = np.linalg.solve(S, H @ P).T
    nis = float(r @ np.linalg.solve(S, r))
    new = _inject(state, K @ r, _joseph(P, K, H, Rm))
    return UpdateResult(new, nis, 6, K)


def update_pose(state: FilterState, m: MarkerPose) -> FilterState:
    """Absolute 6-dof pose update (Joseph form)."""
    return _update_pose(state, m).state


def _inv_sqrt(C, floor: float = 1e-18) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    return (V / np.sqrt(np.maximum(w, floor))) @ V.T


def consistent_cross(P, X, Pj) -> np.ndarray:
    """Shrink ``X`` so that [[P, X], [X^T, Pj]] stays positive semi-definite.

    The history keeps only current-to-entry cross terms, so after several
    relative updates the implied joint matrix can become indefinite.  The
    joint is PSD iff the whitened cross term has spectral norm <= 1.
    """
    M = _inv_sqrt(P) @ X @ _inv_sqrt(Pj)
    s = np.linalg.norm(M, 2)
    if s <= 1.0:
        return X
    return X * ((1.0 - 1e-9) / s)


def _relative_update(state: FilterState, prev: FilterState, X, r, Hc, Hp, Rm):
    """Update from a residual depending on the current and one past error state.

    ``X`` is the cross-covariance Cov(current error, past error).  Returns the
    new state, the gain and the NIS.
    """
    P = state.covariance
    Pj = prev.covariance
    X = consistent_cross(P, X, Pj)
    PHt = P @ Hc.T + X @ Hp.T
    S = Hc @ PHt + Hp @ (X.T @ Hc.T + Pj @ Hp.T) + Rm
    S = 0.5 * (S + S.T)
    K = np.linalg.solve(S, PHt.T).T
    # Joseph form over the stacked (current, past) error
    A = np.eye(9) - K @ Hc
    B = K @ Hp
    Pn = A @ P @ A.T - A @ X @ B.T - B @ X.T @ A.T + B @ Pj @ B.T + K @ Rm @ K.T
    Pn = 0.5 * (Pn + Pn.T)
    nis = float(r @ np.linalg.solve(S, r))
    return _inject(state, K @ r, Pn), K, nis


def _rotation_rows(state: FilterState, prev: FilterState, meas_q, cov, observable):
    pred = qmul(qconj(prev.orientation), state.orientation)
    r = quat_log(qmul(qconj(pred), meas_q))
    dR = quat_to_matrix(pred)
    Hc = np.zeros((3, 9))
    Hc[:, 3:6] = np.eye(3)
    Hp = np.zeros((3, 9))
    Hp[:, 3:6] = -dR.T
    Rm = _check_psd(cov, "relative rotation")
    if observable is not None:
        B = np.asarray(observable, dtype=float).reshape(3, -1)
        r, Hc, Hp, Rm = B.T @ r, B.T @ Hc, B.T @ Hp, B.T @ Rm @ B
    return r, Hc, Hp, Rm


def _delta_rows(state: FilterState, prev: FilterState, d: FeatureDelta):
    Rp = quat_to_matrix(prev.orientation)
    dp_pred = Rp.T @ (state.position - prev.position)
    pred_q = qmul(qconj(prev.orientation), state.orientation)
    r = np.concatenate([d.delta.position - dp_pred,
                        quat_log(qmul(qconj(pred_q), d.delta.orientation))])
    Hc = np.zeros((6, 9))
    Hc[:3, :3] = Rp.T
    Hc[3:, 3:6] = np.eye(3)
    Hp = np.zeros((6, 9))
    Hp[:3, :3] = -Rp.T
    Hp[:3, 3:6] = skew(dp_pred)
    Hp[3:, 3:6] = -quat_to_matrix(pred_q).T
    return r, Hc, Hp, _check_psd(d.covariance, "feature delta")


def update_rotation(state: FilterState, r: PlaneRotation, prev: FilterState, cross=None) -> FilterState:
    """Relative-orientation update against the filter pose ``prev`` held at ``r.t_prev``.

    Without a cross-covariance the past pose is treated as independent of
    the current error, which under-weights the measurement.
    """
    X = np.zeros((9, 9)) if cross is None else cross
    res, Hc, Hp, Rm = _rotation_rows(state, prev, r.q, r.covariance, r.observable)
    return _relative_update(state, prev, X, res, Hc, Hp, Rm)[0]


def update_delta(state: FilterState, d: FeatureDelta, prev: FilterState, cross=None) -> FilterState:
    """Full 6-dof relative pose update against the filter pose ``prev`` held at ``d.t_prev``."""
    X = np.zeros((9, 9)) if cross is None else cross
    res, Hc, Hp, Rm = _delta_rows(state, prev, d)
    return _relative_update(state, prev, X, res, Hc, Hp, Rm)[0]


# ---------------------------------------------------------------------------
# streaming filter with history, rollback and replay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Entry:
    state: FilterState
    cross: np.ndarray  # Cov(current error, error at this entry)


@dataclass
class _Snapshot:
    state: FilterState
    twist: DeadReckonTwist | None
    history: tuple


@dataclass
class NisRecord:
    timestamp: float
    stream: str
    nis: float
    dof: int

    @property
    def in_band(self) -> bool:
        lo, hi = chi2.ppf([0.05, 0.95], self.dof)
        return bool(lo <= self.nis <= hi)


class FusionFilter:
    """Single-writer filter consuming time-stamped events.

    Past filter poses are kept for ``history_seconds`` together with their
    cross-covariance to the current error, so relative measurements between
    a past frame and now are weighted like a cloned state would be.  Events
    older than the latest processed one are applied by rolling back to the
    snapshot preceding them and replaying; events older than the buffer are
    dropped and counted.
    """

    def __init__(self, initial: FilterState, cfg: EkfConfig | None = None):
        self.cfg = cfg or EkfConfig()
        self.state = initial
        self.twist: DeadReckonTwist | None = None
        self._history: list[_Entry] = [_Entry(initial, initial.covariance.copy())]
        self._log: list[tuple[MeasurementEvent, _Snapshot]] = []
        self.dropped = 0
        self.gaps = 0
        self.rejected = 0
        self.nis: list[NisRecord] = []
        self.min_eigenvalue = float(np.linalg.eigvalsh(initial.covariance).min())

    # -- history ---------------------------------------------------------
    def _snapshot(self) -> _Snapshot:
        return _Snapshot(self.state, self.twist, tuple(self._history))

    def _restore(self, snap: _Snapshot) -> None:
        self.state, self.twist, self._history = snap.state, snap.twist, list(snap.history)

    def _record(self) -> None:
        t = self.state.timestamp
        if self._history and abs(self._history[-1].state.timestamp - t) <= self.cfg.time_tolerance:
            self._history.pop()
        self._history.append(_Entry(self.state, self.state.covariance.copy()))
        horizon = t - self.cfg.history_seconds - self.cfg.time_tolerance
        while self._history and self._history[0].state.timestamp < horizon:
            self._history.pop(0)

    def history_at(self, t: float) -> _Entry | None:
        times = [e.state.timestamp for e in self._history]
        i = bisect.bisect_left(times, t - self.cfg.time_tolerance)
        if i < len(times) and abs(times[i] - t) <= self.cfg.time_tolerance:
            return self._history[i]
        return None

    def _transform_cross(self, A) -> None:
        """Left-multiply every stored cross-covariance by ``A`` (linear error map)."""
        self._history = [_Entry(e.state, A @ e.cross) for e in self._history]

    def _reject(self, ev: MeasurementEvent, nis: float, dof: int) -> bool:
        gate = self.cfg.innovation_gate
        if gate is None or nis <= chi2.ppf(gate, dof):
            return False
        self.rejected += 1
        log.info("rejected %s at t=%.3f, NIS %.1f", ev.stream or type(ev.payload).__name__, ev.timestamp, nis)
        self._record()
        return True

    def _check(self) -> None:
        ev = float(np.linalg.eigvalsh(self.state.covariance).min())
        self.min_eigenvalue = min(self.min_eigenvalue, ev)

    # -- primitive steps --------------------------------------------------
    def _advance(self, t: float) -> None:
        dt = t - self.state.timestamp
        if dt < -self.cfg.time_tolerance:
            raise TimeOrderError(f"cannot propagate backwards to {t}")
        if dt <= 0:
            return
        twist = self.twist or DeadReckonTwist(np.zeros(3), np.zeros(3))
        self.state, F = _propagate(self.state, twist, dt, self.cfg)
        self._transform_cross(F)
        self._check()

    def _apply(self, ev: MeasurementEvent) -> None:
        self._advance(ev.timestamp)
        pl = ev.payload
        if isinstance(pl, DeadReckonTwist):
            self.twist = pl
        elif isinstance(pl, MarkerPose):
            res = _update_pose(self.state, pl)
            if self._reject(ev, res.nis, res.dof):
                return
            H = np.zeros((6, 9))
            H[:, :6] = np.eye(6)
            self._transform_cross(np.eye(9) - res.gain @ H)
            self.state = res.state
            self.nis.append(NisRecord(ev.timestamp, ev.stream or "marker", res.nis, res.dof))
        elif isinstance(pl, (PlaneRotation, FeatureDelta)):
            entry = self.history_at(pl.t_prev)
            if entry is None:
                self.gaps += 1
                log.error("gap: no filter pose at t=%.3f for %s", pl.t_prev, type(pl).__name__)
                return
            if isinstance(pl, PlaneRotation):
                rows = _rotation_rows(self.state, entry.state, pl.q, pl.covariance, pl.observable)
            else:
                rows = _delta_rows(self.state, entry.state, pl)
            res, Hc, Hp, Rm = rows
            X = consistent_cross(self.state.covariance, entry.cross, entry.state.covariance)
            new, K, nis = _relative_update(self.state, entry.state, X, res, Hc, Hp, Rm)
            if self._reject(ev, nis, len(res)):
                return
            # past errors other than the referenced one are treated as independent of it
            A = np.eye(9) - K @ Hc
            self._history = [_Entry(e.state, A @ X - K @ Hp @ e.state.covariance) if e is entry
                             else _Entry(e.state, A @ e.cross) for e in self._history]
            self.state = new
            self.nis.append(NisRecord(ev.timestamp, ev.stream or type(pl).__name__, nis, len(res)))
        else:
            raise TypeError(f"unsupported payload {type(pl).__name__}")
        self._check()
        self._record()

    # -- public ---------------------------------------------------------
    def process(self, ev: MeasurementEvent) -> bool:
        """Apply one event; returns False when it was dropped as too old."""
        if ev.timestamp >= self.state.timestamp - self.cfg.time_tolerance:
            snap = self._snapshot()
            self._apply(ev)
            self._log.append((ev, snap))
            self._trim_log()
            return True
        if not self._log or ev.timestamp < self._log[0][0].timestamp:
            self.dropped += 1
            log.warning("dropping event at t=%.3f older than the replay buffer", ev.timestamp)
            return False
        times = [e.timestamp for e, _ in self._log]
        i = bisect.bisect_right(times, ev.timestamp)
        later = [e for e, _ in self._log[i:]]
        self._restore(self._log[i][1] if i < len(self._log) else self._snapshot())
        del self._log[i:]
        for e in [ev] + later:
            snap = self._snapshot()
            self._apply(e)
            self._log.append((e, snap))
        return True

    def _trim_log(self) -> None:
        horizon = self.state.timestamp - self.cfg.history_seconds
        k = 0
        while k < len(self._log) - 1 and self._log[k][0].timestamp < horizon:
            k += 1
        if k:
            del self._log[:k]

    def advance_to(self, t: float) -> FilterState:
        """Propagate to ``t`` without recording an event (for readers)."""
        if t > self.state.timestamp:
            self._advance(t)
            self._record()
        return self.state


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def pose_error(est: FramedPose, gt: FramedPose):
    """(position error m, geodesic orientation error rad)."""
    if (est.target_frame, est.source_frame) != (gt.target_frame, gt.source_frame):
        raise ValueError(f"frame mismatch: {est.target_frame}<-{est.source_frame} vs "
                         f"{gt.target_frame}<-{gt.source_frame}")
    return (float(np.linalg.norm(est.position - gt.position)),
            geodesic_distance(est.orientation, gt.orientation))


def _lag1(x) -> float | None:
    x = np.asarray(x, dtype=float)
    a, b = x[:-1] - x[:-1].mean(), x[1:] - x[1:].mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if den <= 1e-300 * max(len(x), 1):
        return None
    return float(np.clip(np.sum(a * b) / den, -1.0, 1.0))


def lag_one_autocorrelation(traj) -> float:
    """Mean Pearson lag-1 autocorrelation over x, y, z and unwrapped heading.

    Accepts FilterStates or FramedPoses.  Constant channels are skipped; an
    all-constant trajectory scores 1.
    """
    if len(traj) < 3:
        raise ValueError("need at least 3 states")
    pos = np.array([s.position for s in traj])
    yaw = np.unwrap([quat_to_euler(s.orientation)[2] for s in traj])
    vals = [v for v in (_lag1(pos[:, 0]), _lag1(pos[:, 1]), _lag1(pos[:, 2]), _lag1(yaw))
            if v is not None]
    return float(np.mean(vals)) if vals else 1.0


@dataclass
class MetricsReport:
    times: np.ndarray
    position_error: np.ndarray
    orientation_error: np.ndarray
    m_a: float
    modality_counts: dict
    nis_in_band: float = float("nan")
    dropped: int = 0
    gaps: int = 0

    @property
    def mean_position(self) -> float:
        return float(np.mean(self.position_error)) if len(self.position_error) else float("nan")

    @property
    def std_position(self) -> float:
        return float(np.std(self.position_error)) if len(self.position_error) else float("nan")

    @property
    def mean_orientation(self) -> float:
        return float(np.mean(self.orientation_error)) if len(self.orientation_error) else float("nan")

    @property
    def std_orientation(self) -> float:
        return float(np.std(self.orientation_error)) if len(self.orientation_error) else float("nan")

    def summary_row(self, name: str) -> str:
        return (f"{name},{self.mean_position:.6f},{self.std_position:.6f},"
                f"{np.degrees(self.mean_orientation):.6f},{np.degrees(self.std_orientation):.6f},"
                f"{self.m_a:.6f}")


SUMMARY_HEADER = "run,pos_mean_m,pos_std_m,ori_mean_deg,ori_std_deg,m_A"
TRAJECTORY_HEADER = "t,px,py,pz,qw,qx,qy,qz,err_p,err_q,modality"


def build_report(times, states, truths, counts: dict, mask=None, flt: FusionFilter | None = None,
                 m_a_states=None) -> MetricsReport:
    """Errors at the (optionally masked) frames and m_A over the full trajectory."""
    errs = np.array([pose_error(s.pose, g.retagged("odom", "robot")) for s, g in zip(states, truths)])
    mask = np.ones(len(states), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    in_band = float("nan")
    if flt is not None and flt.nis:
        in_band = float(np.mean([r.in_band for r in flt.nis]))
    return MetricsReport(np.asarray(times)[mask], errs[mask, 0], errs[mask, 1],
                         lag_one_autocorrelation(m_a_states if m_a_states is not None else states),
                         dict(counts), in_band,
                         flt.dropped if flt else 0, flt.gaps if flt else 0)

