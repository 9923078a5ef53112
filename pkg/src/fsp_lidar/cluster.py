"""DBSCAN object clustering, per-cluster geometry and truck classification."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .cloud_ops import as_points
from .errors import InvalidParameterError

NOISE = -1


class VehicleClass(enum.Enum):
    LONG_TRUCK = "LongTruck"
    COMPACT_TRUCK = "CompactTruck"
    NON_TRUCK = "NonTruck"

    @property
    def is_truck(self) -> bool:
        return self is not VehicleClass.NON_TRUCK


# Rank used to break vote ties toward the larger class.
CLASS_RANK = {VehicleClass.NON_TRUCK: 0, VehicleClass.COMPACT_TRUCK: 1, VehicleClass.LONG_TRUCK: 2}


@dataclass(frozen=True)
class DbscanParams:
    epsilon: float = 1.2
    min_pts: int = 8

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise InvalidParameterError(f"epsilon must be > 0, got {self.epsilon}")
        if int(self.min_pts) != self.min_pts or self.min_pts < 1:
            raise InvalidParameterError(f"min_pts must be an integer >= 1, got {self.min_pts}")


@dataclass(frozen=True)
class ClassifierThresholds:
    min_abs_height_truck: float = 2.5
    # z of the highest point in the leveled sensor frame; negative when the
    # sensor sits above the road. Use for_site() to derive it from ground_z.
    min_hmax_truck: float = 2.5
    min_sigma_z_truck: float = 0.5
    min_length_long: float = 9.0

    def __post_init__(self):
        for name in ("min_abs_height_truck", "min_sigma_z_truck", "min_length_long"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise InvalidParameterError(f"{name} must be > 0, got {v}")
        if not math.isfinite(self.min_hmax_truck):
            raise InvalidParameterError("min_hmax_truck must be finite")

    @classmethod
    def for_site(cls, ground_z: float, truck_height: float = 2.5, **kw) -> "ClassifierThresholds":
        return cls(min_hmax_truck=ground_z + truck_height, **kw)


@dataclass(frozen=True, eq=False)
class Cluster:
    cluster_id: int
    points: np.ndarray
    centroid: np.ndarray
    hmax: float
    sigma_z: float
    abs_height: float
    extent_xy: tuple[float, float]
    vehicle_class: VehicleClass | None = None

    @property
    def length(self) -> float:
        return self.extent_xy[0]


def dbscan_labels(points, params: DbscanParams) -> np.ndarray:
    """Cluster labels (NOISE for noise) matching sequential scan-order DBSCAN.

    Neighbourhoods are closed balls (distance <= epsilon) and count the point
    itself. Clusters are numbered by their lowest-index core point; a border
    point reachable from several clusters joins the lowest-numbered one, which
    is the cluster a sequential scan reaches first.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    pairs = cKDTree(pts).query_pairs(params.epsilon, output_type="ndarray")
    i, j = (pairs[:, 0], pairs[:, 1]) if len(pairs) else (np.empty(0, int), np.empty(0, int))
    counts = 1 + np.bincount(i, minlength=n) + np.bincount(j, minlength=n)
    core = counts >= params.min_pts
    core_idx = np.flatnonzero(core)
    if len(core_idx) == 0:
        return labels

    both = core[i] & core[j]
    pos = np.full(n, -1, dtype=np.int64)
    pos[core_idx] = np.arange(len(core_idx))
    m = len(core_idx)
    graph = coo_matrix((np.ones(both.sum()), (pos[i[both]], pos[j[both]])), shape=(m, m))
    _, comp = connected_components(graph, directed=False)
    # renumber components by first appearance in index order
    _, first = np.unique(comp, return_index=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    labels[core_idx] = rank[comp]

    big = np.iinfo(np.int64).max
    border = np.full(n, big, dtype=np.int64)
    a_core = core[i] & ~core[j]
    np.minimum.at(border, j[a_core], labels[i[a_core]])
    b_core = core[j] & ~core[i]
    np.minimum.at(border, i[b_core], labels[j[b_core]])
    claimed = ~core & (border != big)
    labels[claimed] = border[claimed]
    return labels


def dbscan(points, params: DbscanParams) -> tuple[list[np.ndarray], np.ndarray]:
    """Split points into (clusters, noise); clusters ordered by label."""
    pts = as_points(points)
    labels = dbscan_labels(pts, params)
    k = labels.max() + 1 if len(labels) else 0
    clusters = [pts[labels == c] for c in range(k)]
    return clusters, pts[labels == NOISE]


def cluster_features(points, cluster_id: int = 0) -> Cluster:
    """Centroid, max height, population z-std, vertical span and x-y extent."""
    pts = as_points(points)
    if len(pts) == 0:
        raise InvalidParameterError("cluster_features needs at least one point")
    z = pts[:, 2]
    span = pts[:, :2].max(axis=0) - pts[:, :2].min(axis=0)
    length, width = float(span.max()), float(span.min())
    return Cluster(
        cluster_id=cluster_id,
        points=pts,
        centroid=pts.mean(axis=0),
        hmax=float(z.max()),
        sigma_z=float(z.std()),
        abs_height=float(z.max() - z.min()),
        extent_xy=(length, width),
    )


def classify_vehicle(cluster: Cluster, th: ClassifierThresholds) -> VehicleClass:
    is_truck = (cluster.abs_height >= th.min_abs_height_truck
                and cluster.hmax >= th.min_hmax_truck
                and cluster.sigma_z >= th.min_sigma_z_truck)
    if not is_truck:
        return VehicleClass.NON_TRUCK
    if cluster.length >= th.min_length_long:
        return VehicleClass.LONG_TRUCK
    return VehicleClass.COMPACT_TRUCK


def detect_objects(points, params: DbscanParams, th: ClassifierThresholds) -> list[Cluster]:
    clusters, _ = dbscan(points, params)
    out = []
    for cid, members in enumerate(clusters):
        c = cluster_features(members, cid)
        out.append(replace(c, vehicle_class=classify_vehicle(c, th)))
    return out
