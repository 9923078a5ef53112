"""Constant-velocity Kalman tracking of cluster centroids.

State is [x, y, z, vx, vy, vz] in the leveled sensor frame; only position is
measured. Association is greedy nearest-neighbour inside a gate radius.
"""

from __future__ import annotations

import enum
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .cluster import CLASS_RANK, Cluster, VehicleClass
from .errors import InvalidParameterError, NumericalError

H = np.hstack([np.eye(3), np.zeros((3, 3))])
H.setflags(write=False)

INIT_VELOCITY_VAR = 25.0


class Direction(enum.Enum):
    APPROACHING = "Approaching"
    DEPARTING = "Departing"
    STATIONARY = "Stationary"
    UNKNOWN = "Unknown"


def _frozen(a, shape) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.shape != shape:
        raise InvalidParameterError(f"expected shape {shape}, got {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class KalmanState:
    x: np.ndarray
    P: np.ndarray
    innovation: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(self.x, (6,)))
        object.__setattr__(self, "P", _frozen(self.P, (6, 6)))

    @property
    def position(self) -> np.ndarray:
        return self.x[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.x[3:]


@dataclass(frozen=True, eq=False)
class NoiseParams:
    """Per-axis process noise: position q_pos*dt^2, velocity q_vel*dt.

    `Q` overrides the dt-scaled default when given.
    """
    q_pos: float = 0.1
    q_vel: float = 1.0
    R: np.ndarray = field(default_factory=lambda: 0.2 ** 2 * np.eye(3))
    Q: np.ndarray | None = None

    def __post_init__(self):
        R = _frozen(self.R, (3, 3))
        _check_psd(R, "R")
        object.__setattr__(self, "R", R)
        if self.Q is not None:
            Q = _frozen(self.Q, (6, 6))
            _check_psd(Q, "Q")
            object.__setattr__(self, "Q", Q)
        if self.q_pos < 0 or self.q_vel < 0:
            raise InvalidParameterError("process noise coefficients must be >= 0")

    def process_cov(self, dt: float) -> np.ndarray:
        if self.Q is not None:
            return self.Q
        return np.diag([self.q_pos * dt * dt] * 3 + [self.q_vel * dt] * 3)


def _check_psd(M: np.ndarray, name: str) -> None:
    if not np.allclose(M, M.T, atol=1e-9):
        raise InvalidParameterError(f"{name} is not symmetric")
    if np.linalg.eigvalsh((M + M.T) / 2).min() < -1e-9:
        raise InvalidParameterError(f"{name} is not positive semidefinite")


def transition(dt: float) -> np.ndarray:
    A = np.eye(6)
    A[0, 3] = A[1, 4] = A[2, 5] = dt
    return A


def kf_predict(state: KalmanState, dt: float, Q) -> KalmanState:
    if not (dt > 0 and math.isfinite(dt)):
        raise InvalidParameterError(f"dt must be > 0, got {dt}")
    A = transition(dt)
    P = A @ state.P @ A.T + np.asarray(Q, dtype=np.float64)
    return KalmanState(A @ state.x, (P + P.T) / 2)


def kf_update(state: KalmanState, z, R) -> KalmanState:
    z = np.asarray(z, dtype=np.float64).reshape(3)
    innovation = z - H @ state.x
    S = H @ state.P @ H.T + np.asarray(R, dtype=np.float64)
    PHt = state.P @ H.T
    try:
        # K = P H^T S^-1, solved rather than inverted
        K = np.linalg.solve(S, PHt.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular innovation covariance S={S.tolist()}") from exc
    x = state.x + K @ innovation
    P = (np.eye(6) - K @ H) @ state.P
    return KalmanState(x, (P + P.T) / 2, innovation=innovation)


@dataclass(frozen=True)
class SensorSiteConfig:
    sensor_position: tuple = (0.0, 0.0, 0.0)
    stop_line_position: tuple = (0.0, 0.0, 0.0)
    min_speed: float = 0.5
    gate_radius: float = 5.0
    max_missed: int = 5
    min_hits: int = 3
    ground_z: float = 0.0
    site_id: str = "site"

    def __post_init__(self):
        if not self.min_speed > 0:
            raise InvalidParameterError("min_speed must be > 0")
        if not self.gate_radius > 0:
            raise InvalidParameterError("gate_radius must be > 0")
        if self.max_missed < 0 or self.min_hits < 1:
            raise InvalidParameterError("max_missed must be >= 0 and min_hits >= 1")
        object.__setattr__(self, "sensor_position", tuple(float(v) for v in self.sensor_position))
        object.__setattr__(self, "stop_line_position", tuple(float(v) for v in self.stop_line_position))


@dataclass
class Track:
    track_id: int
    state: KalmanState
    class_votes: Counter = field(default_factory=Counter)
    direction: Direction = Direction.UNKNOWN
    # number of frames with an associated detection, birth included
    age_frames: int = 1
    missed_frames: int = 0
    history: list = field(default_factory=list)

    @property
    def position(self) -> np.ndarray:
        return self.state.position

    @property
    def velocity(self) -> np.ndarray:
        return self.state.velocity

    @property
    def vehicle_class(self) -> VehicleClass:
        """Majority vote; ties go to the larger class."""
        if not self.class_votes:
            return VehicleClass.NON_TRUCK
        return max(self.class_votes.items(), key=lambda kv: (kv[1], CLASS_RANK[kv[0]]))[0]


def is_reportable(track: Track, cfg: SensorSiteConfig) -> bool:
    return track.age_frames >= cfg.min_hits and track.missed_frames == 0


def spawn_track(track_id: int, detection: Cluster, noise: NoiseParams, timestamp: float) -> Track:
    x = np.concatenate([detection.centroid, np.zeros(3)])
    P = np.zeros((6, 6))
    P[:3, :3] = noise.R
    P[3:, 3:] = INIT_VELOCITY_VAR * np.eye(3)
    votes = Counter()
    if detection.vehicle_class is not None:
        votes[detection.vehicle_class] += 1
    return Track(track_id, KalmanState(x, P), votes, history=[(timestamp, tuple(detection.centroid))])


def associate(pred_positions: np.ndarray, track_ids: Sequence[int], centroids: np.ndarray,
              gate_radius: float) -> list[tuple[int, int]]:
    """Greedy closest-pair-first matching; returns (track_index, detection_index)."""
    if len(pred_positions) == 0 or len(centroids) == 0:
        return []
    dist = np.linalg.norm(pred_positions[:, None, :] - centroids[None, :, :], axis=2)
    ti, di = np.nonzero(dist <= gate_radius)
    order = sorted(zip(dist[ti, di], (track_ids[t] for t in ti), di, ti))
    used_t, used_d, pairs = set(), set(), []
    for _, _, d, t in order:
        if t in used_t or d in used_d:
            continue
        used_t.add(t)
        used_d.add(d)
        pairs.append((int(t), int(d)))
    return pairs


def step_tracker(tracks: Sequence[Track], detections: Sequence[Cluster], dt: float,
                 cfg: SensorSiteConfig, noise: NoiseParams, timestamp: float | None = None,
                 id_counter: Iterator[int] | None = None) -> list[Track]:
    """Advance every track one frame and fold in this frame's detections.

    Returns new Track objects; the inputs are not modified. New tracks take
    ids from `id_counter` (default: one past the largest id seen).
    """
    if not (dt > 0 and math.isfinite(dt)):
        raise InvalidParameterError(f"dt must be > 0, got {dt}")
    if id_counter is None:
        id_counter = itertools.count(max((t.track_id for t in tracks), default=-1) + 1)
    if timestamp is None:
        last = max((t.history[-1][0] for t in tracks if t.history), default=0.0)
        timestamp = last + dt

    Q = noise.process_cov(dt)
    predicted = [replace(t, state=kf_predict(t.state, dt, Q), class_votes=Counter(t.class_votes),
                         history=list(t.history)) for t in tracks]
    centroids = np.array([d.centroid for d in detections], dtype=np.float64).reshape(-1, 3)
    pred_pos = np.array([t.position for t in predicted]).reshape(-1, 3)
    pairs = associate(pred_pos, [t.track_id for t in predicted], centroids, cfg.gate_radius)

    matched_d = {d for _, d in pairs}
    for t_idx, d_idx in pairs:
        trk, det = predicted[t_idx], detections[d_idx]
        trk.state = kf_update(trk.state, det.centroid, noise.R)
        if det.vehicle_class is not None:
            trk.class_votes[det.vehicle_class] += 1
        trk.age_frames += 1
        trk.missed_frames = 0
        trk.history.append((timestamp, tuple(trk.position)))

    matched_t = {t for t, _ in pairs}
    out = []
    for idx, trk in enumerate(predicted):
        if idx not in matched_t:
            trk.missed_frames += 1
            if trk.missed_frames > cfg.max_missed:
                continue
        out.append(trk)
    for d_idx, det in enumerate(detections):
        if d_idx not in matched_d:
            out.append(spawn_track(next(id_counter), det, noise, timestamp))
    for trk in out:
        trk.direction = motion_direction(trk, cfg)
    return out


def motion_direction(track: Track, cfg: SensorSiteConfig) -> Direction:
    """Sign of velocity . line-of-sight, where line-of-sight points object -> sensor."""
    a = track.velocity
    if np.linalg.norm(a) < cfg.min_speed:
        return Direction.STATIONARY
    b = np.asarray(cfg.sensor_position) - track.position
    s = float(a @ b)
    if s > 0:
        return Direction.APPROACHING
    if s < 0:
        return Direction.DEPARTING
    return Direction.UNKNOWN


def horizontal_speed(track: Track) -> float:
    return float(math.hypot(track.velocity[0], track.velocity[1]))


def estimate_toa(track: Track, cfg: SensorSiteConfig) -> float | None:
    """Seconds to the stop line along the straight horizontal line, or None."""
    if motion_direction(track, cfg) is not Direction.APPROACHING:
        return None
    speed = horizontal_speed(track)
    if speed < cfg.min_speed:
        return None
    d = np.asarray(cfg.stop_line_position[:2]) - track.position[:2]
    return float(math.hypot(d[0], d[1]) / speed)


class MultiObjectTracker:
    """Stateful wrapper: one step() per frame, in frame order."""

    def __init__(self, cfg: SensorSiteConfig, noise: NoiseParams, default_dt: float = 0.1):
        self.cfg = cfg
        self.noise = noise
        self.default_dt = default_dt
        self.tracks: list[Track] = []
        self.last_timestamp: float | None = None
        self._ids = itertools.count()

    def step(self, detections: Sequence[Cluster], timestamp: float) -> list[Track]:
        if self.last_timestamp is None:
            dt = self.default_dt
        else:
            dt = timestamp - self.last_timestamp
        self.tracks = step_tracker(self.tracks, detections, dt, self.cfg, self.noise,
                                   timestamp=timestamp, id_counter=self._ids)
        self.last_timestamp = timestamp
        return self.tracks

    def reportable(self) -> list[Track]:
        return [t for t in self.tracks if is_reportable(t, self.cfg)]
