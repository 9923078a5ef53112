"""Geometric preprocessing of raw LiDAR frames.

Tilt correction, polygon ROI cropping and voxel-grid downsampling. Every
function here is pure: frames are frozen and point arrays are read-only.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidParameterError, StateError

HALF_PI = math.pi / 2


class FrameTag(enum.Enum):
    SENSOR = "SensorFrame"
    LEVELED = "LeveledFrame"
    ENU = "EnuFrame"


_TAG_ORDER = {FrameTag.SENSOR: 0, FrameTag.LEVELED: 1, FrameTag.ENU: 2}


def as_points(points) -> np.ndarray:
    """Return a read-only (N, 3) float64 array, rejecting non-finite values."""
    arr = np.array(points, dtype=np.float64, copy=True)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidParameterError(f"points must have shape (N, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise InvalidParameterError("points contain NaN or Inf")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloudFrame:
    frame_id: int
    timestamp: float
    points: np.ndarray
    frame_tag: FrameTag = FrameTag.SENSOR
    diagnostics: Mapping[str, float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "points", as_points(self.points))

    def __len__(self):
        return len(self.points)

    def with_points(self, points, frame_tag: FrameTag | None = None, **diagnostics) -> "PointCloudFrame":
        tag = self.frame_tag if frame_tag is None else frame_tag
        if _TAG_ORDER[tag] < _TAG_ORDER[self.frame_tag]:
            raise StateError(f"cannot move frame from {self.frame_tag.value} back to {tag.value}")
        diag = {**self.diagnostics, **diagnostics}
        return replace(self, points=points, frame_tag=tag, diagnostics=diag)


@dataclass(frozen=True)
class TiltAngles:
    roll_phi: float = 0.0
    pitch_theta: float = 0.0

    def __post_init__(self):
        # Closed interval so the exact quarter-turn cases remain expressible.
        for name in ("roll_phi", "pitch_theta"):
            v = getattr(self, name)
            if not math.isfinite(v) or abs(v) > HALF_PI:
                raise InvalidParameterError(f"{name}={v} outside [-pi/2, pi/2]")


@dataclass(frozen=True)
class RegionOfInterest:
    polygon_xy: tuple
    z_min: float
    z_max: float

    def __post_init__(self):
        poly = np.asarray(self.polygon_xy, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
            raise InvalidParameterError("ROI polygon needs at least 3 (x, y) vertices")
        if not np.isfinite(poly).all():
            raise InvalidParameterError("ROI polygon has non-finite vertices")
        if not _is_simple_polygon(poly):
            raise InvalidParameterError("ROI polygon is self-intersecting or degenerate")
        if not self.z_min < self.z_max:
            raise InvalidParameterError(f"z_min={self.z_min} must be < z_max={self.z_max}")
        object.__setattr__(self, "polygon_xy", tuple(map(tuple, poly.tolist())))


@dataclass(frozen=True)
class VoxelParams:
    voxel_size_sv: float = 0.2

    def __post_init__(self):
        if not (self.voxel_size_sv > 0 and math.isfinite(self.voxel_size_sv)):
            raise InvalidParameterError(f"voxel_size_sv must be > 0, got {self.voxel_size_sv}")


def rot_x(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _exact_trig_cleanup(R: np.ndarray) -> np.ndarray:
    # cos(pi/2) evaluates to 6e-17; snap such residue so quarter turns are exact.
    R = R.copy()
    R[np.abs(R) < 1e-15] = 0.0
    return R


def build_rotation(angles: TiltAngles) -> np.ndarray:
    """Mounting rotation R = R_y(pitch) @ R_x(roll)."""
    if not isinstance(angles, TiltAngles):
        angles = TiltAngles(*angles)
    R = _exact_trig_cleanup(rot_y(angles.pitch_theta) @ rot_x(angles.roll_phi))
    R.setflags(write=False)
    return R


def correct_frame(frame: PointCloudFrame, R: np.ndarray) -> PointCloudFrame:
    """Level a sensor-frame cloud: every point p becomes R^T p."""
    if frame.frame_tag is not FrameTag.SENSOR:
        raise StateError(f"correct_frame expects a SensorFrame, got {frame.frame_tag.value}")
    R = np.asarray(R, dtype=np.float64)
    # (R^T p)^T == p^T R for row-stacked points
    return frame.with_points(frame.points @ R, FrameTag.LEVELED)


def fit_ground_plane(points) -> np.ndarray:
    """Unit normal (z >= 0) of the least-squares plane through `points`."""
    pts = as_points(points)
    if len(pts) < 3:
        raise InvalidParameterError("plane fit needs at least 3 points")
    centered = pts - pts.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[1] < 1e-9 * max(s[0], 1e-300):
        raise InvalidParameterError("ground points are collinear; plane is undefined")
    n = vt[-1]
    return n if n[2] >= 0 else -n


def tilt_from_ground(points) -> TiltAngles:
    """Derive (roll, pitch) from user-marked ground points in the sensor frame.

    With R = R_y(theta) R_x(phi) the sensor-frame ground normal is
    R e_z = (sin(theta) cos(phi), -sin(phi), cos(theta) cos(phi)).
    """
    n = fit_ground_plane(points)
    phi = -math.asin(float(np.clip(n[1], -1.0, 1.0)))
    theta = math.atan2(float(n[0]), float(n[2]))
    return TiltAngles(roll_phi=phi, pitch_theta=theta)


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12 and \
            min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (o1 == 0 and on_seg(p1, p2, q1)) or (o2 == 0 and on_seg(p1, p2, q2)) or \
        (o3 == 0 and on_seg(q1, q2, p1)) or (o4 == 0 and on_seg(q1, q2, p2))


def _is_simple_polygon(poly: np.ndarray) -> bool:
    n = len(poly)
    area = 0.5 * np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    if abs(area) < 1e-12:
        return False
    edges = [(poly[i], poly[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        if np.allclose(edges[i][0], edges[i][1]):
            return False
        for j in range(i + 1, n):
            # adjacent edges share exactly one vertex
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_intersect(*edges[i], *edges[j]):
                return False
    return True


def points_in_polygon(xy: np.ndarray, polygon: Sequence) -> np.ndarray:
    """Boolean mask of points inside or on the boundary of `polygon`."""
    poly = np.asarray(polygon, dtype=np.float64)
    x, y = xy[:, 0], xy[:, 1]
    inside = np.zeros(len(xy), dtype=bool)
    on_edge = np.zeros(len(xy), dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        seg_len = math.hypot(x2 - x1, y2 - y1)
        on_edge |= (np.abs(cross) <= 1e-9 * seg_len) & \
            (x >= min(x1, x2) - 1e-12) & (x <= max(x1, x2) + 1e-12) & \
            (y >= min(y1, y2) - 1e-12) & (y <= max(y1, y2) + 1e-12)
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < x_at)
    return inside | on_edge


def crop_mask(points: np.ndarray, roi: RegionOfInterest) -> np.ndarray:
    z = points[:, 2]
    mask = (z >= roi.z_min) & (z <= roi.z_max)
    if mask.any():
        idx = np.flatnonzero(mask)
        mask[idx] = points_in_polygon(points[idx, :2], roi.polygon_xy)
    return mask


def crop_roi(frame: PointCloudFrame, roi: RegionOfInterest) -> PointCloudFrame:
    """Keep points inside the ROI prism; boundaries are inclusive, order kept."""
    return frame.with_points(frame.points[crop_mask(frame.points, roi)])


def voxel_indices(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(points / voxel_size).astype(np.int64)


def voxel_centroids(points: np.ndarray, voxel_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Centroid per occupied voxel, ordered by ascending (kx, ky, kz).

    Returns (centroids, voxel_keys) where voxel_keys is (M, 3) int64.
    """
    if voxel_size <= 0:
        raise InvalidParameterError(f"voxel size must be > 0, got {voxel_size}")
    if len(points) == 0:
        return np.empty((0, 3)), np.empty((0, 3), dtype=np.int64)
    k = voxel_indices(points, voxel_size)
    kmin = k.min(axis=0)
    span = k.max(axis=0) - kmin + 1
    if float(span[0]) * float(span[1]) * float(span[2]) < 2**62:
        # pack into one int64 whose order equals lexicographic order of (kx, ky, kz)
        rel = k - kmin
        flat = (rel[:, 0] * span[1] + rel[:, 1]) * span[2] + rel[:, 2]
        order = np.argsort(flat, kind="stable")
        sorted_flat = flat[order]
        starts = np.flatnonzero(np.concatenate(([True], sorted_flat[1:] != sorted_flat[:-1])))
    else:
        order = np.lexsort((k[:, 2], k[:, 1], k[:, 0]))
        ks = k[order]
        starts = np.flatnonzero(np.concatenate(([True], np.any(ks[1:] != ks[:-1], axis=1))))
    grouped = points[order]
    keys = k[order[starts]]
    counts = np.diff(np.append(starts, len(points)))
    centroids = np.add.reduceat(grouped, starts, axis=0) / counts[:, None]
    # Rounding in the mean can push a centroid a hair past its members' hull,
    # and therefore out of its voxel; the members' bounds share the voxel.
    lo = np.minimum.reduceat(grouped, starts, axis=0)
    hi = np.maximum.reduceat(grouped, starts, axis=0)
    return np.clip(centroids, lo, hi), keys


def voxel_downsample(frame: PointCloudFrame, params: VoxelParams) -> PointCloudFrame:
    centroids, _ = voxel_centroids(frame.points, params.voxel_size_sv)
    return frame.with_points(centroids)
