"""LiDAR -> ENU extrinsic calibration.

Two stages: a static point-pair rigid registration gives (R0, t0); a moving
vehicle's LiDAR track, mapped through (R0, t0), is then aligned against the
GPS trajectory by arc length to refine yaw, planar offset and height.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometryError, InsufficientDataError, InvalidParameterError

log = logging.getLogger(__name__)

# WGS-84
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)

COLLINEAR_RATIO = 1e-6
NEAR_COLLINEAR_RATIO = 1e-2
DEFAULT_SPACING = 0.5

# Extended precision keeps geodetic <-> ENU round trips at the picometre level;
# plain float64 ECEF arithmetic loses ~1e-9 m at Earth-radius magnitudes.
_LD = np.longdouble


class NearCollinearWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GeodeticCoord:
    latitude_deg: float
    longitude_deg: float
    altitude_m: float = 0.0

    def __post_init__(self):
        vals = (self.latitude_deg, self.longitude_deg, self.altitude_m)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidParameterError("geodetic coordinate must be finite")
        if abs(self.latitude_deg) > 90 or abs(self.longitude_deg) > 180:
            raise InvalidParameterError(f"latitude/longitude out of range: {vals[:2]}")

    def as_array(self) -> np.ndarray:
        return np.array([self.latitude_deg, self.longitude_deg, self.altitude_m])

    def to_dict(self):
        return {"lat": self.latitude_deg, "lon": self.longitude_deg, "alt": self.altitude_m}

    @classmethod
    def parse(cls, text: str) -> "GeodeticCoord":
        """Parse "lat,lon,alt" (alt optional)."""
        parts = [float(v) for v in text.split(",")]
        if len(parts) not in (2, 3):
            raise InvalidParameterError(f"expected lat,lon[,alt], got {text!r}")
        return cls(*parts)


@dataclass(frozen=True)
class EnuReference:
    origin: GeodeticCoord


def _geodetic_rows(g) -> tuple[np.ndarray, bool]:
    if isinstance(g, GeodeticCoord):
        return g.as_array()[None, :], True
    arr = np.asarray(g, dtype=np.float64)
    single = arr.ndim == 1
    arr = arr.reshape(-1, 3)
    if not np.isfinite(arr).all():
        raise InvalidParameterError("geodetic coordinates must be finite")
    if (np.abs(arr[:, 0]) > 90).any() or (np.abs(arr[:, 1]) > 180).any():
        raise InvalidParameterError("latitude/longitude out of range")
    return arr, single


def _ecef(lat_deg, lon_deg, h):
    lat = np.radians(lat_deg.astype(_LD))
    lon = np.radians(lon_deg.astype(_LD))
    h = h.astype(_LD)
    s = np.sin(lat)
    n = _LD(WGS84_A) / np.sqrt(1 - _LD(WGS84_E2) * s * s)
    return np.stack([(n + h) * np.cos(lat) * np.cos(lon),
                     (n + h) * np.cos(lat) * np.sin(lon),
                     (n * (1 - _LD(WGS84_E2)) + h) * s], axis=-1)


def _enu_basis(ref: EnuReference) -> np.ndarray:
    """Rows are the east, north and up unit vectors in ECEF."""
    lat = np.radians(_LD(ref.origin.latitude_deg))
    lon = np.radians(_LD(ref.origin.longitude_deg))
    sl, cl, so, co = np.sin(lat), np.cos(lat), np.sin(lon), np.cos(lon)
    return np.array([[-so, co, 0],
                     [-sl * co, -sl * so, cl],
                     [cl * co, cl * so, sl]], dtype=_LD)


def _ref_ecef(ref: EnuReference):
    o = ref.origin
    return _ecef(np.array([o.latitude_deg]), np.array([o.longitude_deg]), np.array([o.altitude_m]))[0]


def geodetic_to_enu(g, ref: EnuReference) -> np.ndarray:
    """WGS-84 geodetic (deg, deg, m) -> ECEF -> local ENU metres at `ref`."""
    rows, single = _geodetic_rows(g)
    d = _ecef(rows[:, 0], rows[:, 1], rows[:, 2]) - _ref_ecef(ref)
    enu = (d @ _enu_basis(ref).T).astype(np.float64)
    return enu[0] if single else enu


def enu_to_geodetic(enu, ref: EnuReference) -> np.ndarray:
    """Inverse of geodetic_to_enu; returns (lat_deg, lon_deg, alt_m) rows."""
    arr = np.asarray(enu, dtype=np.float64)
    single = arr.ndim == 1
    arr = arr.reshape(-1, 3).astype(_LD)
    xyz = arr @ _enu_basis(ref) + _ref_ecef(ref)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    p = np.hypot(x, y)
    lon = np.arctan2(y, x)
    e2 = _LD(WGS84_E2)
    lat = np.arctan2(z, p * (1 - e2))
    # fixed-point iteration on latitude; converges to machine precision near the surface
    for _ in range(8):
        s = np.sin(lat)
        n = _LD(WGS84_A) / np.sqrt(1 - e2 * s * s)
        h = p / np.cos(lat) - n
        lat = np.arctan2(z, p * (1 - e2 * n / (n + h)))
    s = np.sin(lat)
    n = _LD(WGS84_A) / np.sqrt(1 - e2 * s * s)
    h = p / np.cos(lat) - n
    out = np.stack([np.degrees(lat), np.degrees(lon), h], axis=-1).astype(np.float64)
    return out[0] if single else out


def _check_rotation(R: np.ndarray, tol: float = 1e-9) -> None:
    if R.shape != (3, 3) or not np.isfinite(R).all():
        raise InvalidParameterError("rotation must be a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1) > tol:
        raise InvalidParameterError("rotation is not in SO(3)")


@dataclass(frozen=True, eq=False)
class RigidTransform3D:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    residuals: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        _check_rotation(R)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def apply(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.R.T + self.t

    def inverse(self) -> "RigidTransform3D":
        return RigidTransform3D(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidTransform3D") -> "RigidTransform3D":
        """self after other."""
        return RigidTransform3D(self.R @ other.R, self.R @ other.t + self.t)


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix, robust near 0 and pi."""
    R = np.asarray(R)
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(math.atan2(np.linalg.norm(skew) / 2, (np.trace(R) - 1) / 2))


def apply_extrinsic(tf: RigidTransform3D, p) -> np.ndarray:
    return tf.apply(p)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    lidar: np.ndarray
    enu: np.ndarray

    def __post_init__(self):
        lid = np.array(self.lidar, dtype=np.float64).reshape(-1, 3)
        enu = np.array(self.enu, dtype=np.float64).reshape(-1, 3)
        if len(lid) != len(enu):
            raise InvalidParameterError("lidar and enu point counts differ")
        if not (np.isfinite(lid).all() and np.isfinite(enu).all()):
            raise InvalidParameterError("correspondences must be finite")
        object.__setattr__(self, "lidar", lid)
        object.__setattr__(self, "enu", enu)

    def __len__(self):
        return len(self.lidar)


def collinearity_ratio(points: np.ndarray) -> float:
    """Second / first singular value of the centred point matrix."""
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return float(s[1] / s[0]) if s[0] > 0 else 0.0


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Proper rotation R and translation t minimising sum |R src_i + t - dst_i|^2.

    Works for any dimension; the last singular direction absorbs the
    determinant sign so R is never a reflection.
    """
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    Hm = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(Hm)
    D = np.eye(src.shape[1])
    D[-1, -1] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def estimate_static_extrinsic(c: CorrespondenceSet) -> RigidTransform3D:
    """Least-squares rigid transform mapping LiDAR points onto their ENU pairs."""
    if len(c) < 3:
        raise DegenerateGeometryError(f"need at least 3 correspondences, got {len(c)}")
    ratio = collinearity_ratio(c.lidar)
    if ratio < COLLINEAR_RATIO:
        raise DegenerateGeometryError(
            f"LiDAR reference points are collinear (singular value ratio {ratio:.2e}); "
            "rotation about their common line is unobservable")
    if ratio < NEAR_COLLINEAR_RATIO:
        warnings.warn(f"LiDAR reference points are nearly collinear (ratio {ratio:.2e}); "
                      "spread them across the road plane", NearCollinearWarning, stacklevel=2)
    R, t = kabsch(c.lidar, c.enu)
    # re-project to SO(3) against accumulated rounding
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    res = np.linalg.norm(c.lidar @ R.T + t - c.enu, axis=1)
    return RigidTransform3D(R, t, residuals=res)


@dataclass(frozen=True, eq=False)
class TrajectorySamples:
    positions: np.ndarray
    arclength: np.ndarray

    def __len__(self):
        return len(self.positions)


def resample_by_arclength(traj, spacing: float = DEFAULT_SPACING) -> TrajectorySamples:
    """Linear interpolation at s = 0, spacing, 2*spacing, ..., total length."""
    if not spacing > 0:
        raise InvalidParameterError(f"spacing must be > 0, got {spacing}")
    pts = np.asarray(traj, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2:
        raise InvalidParameterError("trajectory needs at least 2 points")
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    pts = pts[keep]
    if len(pts) < 2:
        raise DegenerateGeometryError("trajectory points are all identical")
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    total = cum[-1]
    s = spacing * np.arange(int(math.floor(total / spacing + 1e-9)) + 1)
    s = s[s < total - 1e-9 * spacing]
    s = np.append(s, total)
    out = np.stack([np.interp(s, cum, pts[:, d]) for d in range(pts.shape[1])], axis=1)
    return TrajectorySamples(out, s)


@dataclass(frozen=True)
class PlanarRefinement:
    theta_yaw: float = 0.0
    t_xy: tuple = (0.0, 0.0)
    delta_z: float = 0.0

    def __post_init__(self):
        # wrap into (-pi, pi]
        th = math.atan2(math.sin(self.theta_yaw), math.cos(self.theta_yaw))
        if th == -math.pi:
            th = math.pi
        object.__setattr__(self, "theta_yaw", th)
        object.__setattr__(self, "t_xy", tuple(float(v) for v in self.t_xy))

    def yaw_matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta_yaw), math.sin(self.theta_yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def as_transform(self) -> RigidTransform3D:
        return RigidTransform3D(self.yaw_matrix(), [self.t_xy[0], self.t_xy[1], self.delta_z])


def _positions(traj) -> np.ndarray:
    return traj.positions if isinstance(traj, TrajectorySamples) else np.asarray(traj, dtype=np.float64)


def pair_by_index(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Pair resampled trajectories index-wise, truncating to the shorter."""
    pa, pb = _positions(a), _positions(b)
    n = min(len(pa), len(pb))
    return pa[:n], pb[:n]


def refine_planar_and_vertical_multi(pairs: Sequence[tuple]) -> PlanarRefinement:
    """Yaw / planar-offset / height refinement over several trajectory pairs.

    All paired samples go into one least-squares problem.
    """
    lid, gps = [], []
    for lidar_traj, gps_traj in pairs:
        a, b = pair_by_index(lidar_traj, gps_traj)
        lid.append(a)
        gps.append(b)
    lid = np.concatenate(lid) if lid else np.empty((0, 3))
    gps = np.concatenate(gps) if gps else np.empty((0, 3))
    if len(lid) < 3:
        raise InsufficientDataError(f"need at least 3 paired samples, got {len(lid)}")
    R2, t2 = kabsch(lid[:, :2], gps[:, :2])
    theta = math.atan2(R2[1, 0], R2[0, 0])
    return PlanarRefinement(theta, tuple(t2), float(gps[:, 2].mean() - lid[:, 2].mean()))


def refine_planar_and_vertical(lidar_traj_enu, gps_traj_enu) -> PlanarRefinement:
    return refine_planar_and_vertical_multi([(lidar_traj_enu, gps_traj_enu)])


def compose_final(initial: RigidTransform3D, refine: PlanarRefinement) -> RigidTransform3D:
    """R = Rz R0, t = Rz t0 + [t_xy, dz]."""
    Rz = refine.yaw_matrix()
    R = Rz @ initial.R
    U, _, Vt = np.linalg.svd(R)
    t_ref = np.array([refine.t_xy[0], refine.t_xy[1], refine.delta_z])
    return RigidTransform3D(U @ Vt, Rz @ initial.t + t_ref)


@dataclass(frozen=True, eq=False)
class ErrorReport:
    per_point: np.ndarray
    mean: float
    max: float

    @classmethod
    def from_errors(cls, e) -> "ErrorReport":
        e = np.asarray(e, dtype=np.float64)
        if len(e) == 0:
            raise InsufficientDataError("no samples to report")
        return cls(e, float(e.mean()), float(e.max()))

    def summary(self):
        return {"mean": self.mean, "max": self.max}


def static_registration_error(c: CorrespondenceSet, tf: RigidTransform3D) -> ErrorReport:
    return ErrorReport.from_errors(np.linalg.norm(tf.apply(c.lidar) - c.enu, axis=1))


def trajectory_alignment_error(lidar_traj, gps_traj) -> ErrorReport:
    """Horizontal distance between index-paired samples."""
    a, b = pair_by_index(lidar_traj, gps_traj)
    if len(a) == 0:
        raise InsufficientDataError("trajectories have no paired samples")
    return ErrorReport.from_errors(np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1]))


@dataclass
class CalibrationArtifact:
    enu_reference: EnuReference
    transform: RigidTransform3D
    static_error: dict | None = None
    trajectory_error: dict | None = None
    created_at: str = ""

    def to_dict(self):
        return {"enu_reference": self.enu_reference.origin.to_dict(),
                "R": [float(v) for v in self.transform.R.ravel()],
                "t": [float(v) for v in self.transform.t],
                "static_error": self.static_error,
                "trajectory_error": self.trajectory_error,
                "created_at": self.created_at or datetime.now(timezone.utc).isoformat(timespec="seconds")}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationArtifact":
        d = json.loads(Path(path).read_text())
        ref = d["enu_reference"]
        return cls(EnuReference(GeodeticCoord(ref["lat"], ref["lon"], ref.get("alt", 0.0))),
                   RigidTransform3D(np.array(d["R"]).reshape(3, 3), d["t"]),
                   d.get("static_error"), d.get("trajectory_error"), d.get("created_at", ""))


def read_numeric_csv(path, ncols: int) -> np.ndarray:
    """Rows of `ncols` floats; a leading non-numeric header row is skipped."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if lineno == 0:
                    continue
                raise InvalidParameterError(f"{path}:{lineno + 1}: non-numeric row {row}")
            if len(vals) != ncols:
                raise InvalidParameterError(f"{path}:{lineno + 1}: expected {ncols} columns, got {len(vals)}")
            rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(-1, ncols)


def load_correspondences(path, ref: EnuReference) -> CorrespondenceSet:
    """CSV rows lidar_x,lidar_y,lidar_z,lat,lon,alt."""
    rows = read_numeric_csv(path, 6)
    return CorrespondenceSet(rows[:, :3], geodetic_to_enu(rows[:, 3:], ref))


def load_gps_trajectory(path, ref: EnuReference) -> np.ndarray:
    """CSV rows timestamp,lat,lon,alt -> ENU positions in timestamp order."""
    rows = read_numeric_csv(path, 4)
    rows = rows[np.argsort(rows[:, 0], kind="stable")]
    return geodetic_to_enu(rows[:, 1:], ref)


def load_lidar_trajectory(path) -> np.ndarray:
    """CSV rows timestamp,x,y,z (leveled LiDAR frame) in timestamp order."""
    rows = read_numeric_csv(path, 4)
    rows = rows[np.argsort(rows[:, 0], kind="stable")]
    return rows[:, 1:]
