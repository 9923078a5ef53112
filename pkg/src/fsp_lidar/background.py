"""Multi-frame background map and adaptive foreground extraction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .cloud_ops import FrameTag, PointCloudFrame, as_points, voxel_centroids
from .errors import InvalidParameterError
from .frames_io import read_frame, write_frame

DEFAULT_DEDUP_VOXEL = 0.1


@dataclass(frozen=True)
class ForegroundParams:
    alpha: float = 2.0
    clamp: bool = False
    tau_min: float = 0.2
    tau_max: float = 2.0

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise InvalidParameterError(f"alpha must be > 0, got {self.alpha}")
        if self.clamp and not 0 <= self.tau_min <= self.tau_max:
            raise InvalidParameterError("clamp requires 0 <= tau_min <= tau_max")


@dataclass(frozen=True, eq=False)
class BackgroundMap:
    points: np.ndarray
    dedup_voxel: float = DEFAULT_DEDUP_VOXEL
    source_frame_ids: tuple = ()
    created_at: str = ""
    tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        pts = as_points(self.points)
        if len(pts) == 0:
            raise InvalidParameterError("background map must contain at least one point")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "tree", cKDTree(pts, balanced_tree=False, compact_nodes=False))

    def __len__(self):
        return len(self.points)

    def save(self, path) -> None:
        path = Path(path)
        write_frame(path, PointCloudFrame(0, 0.0, self.points, FrameTag.LEVELED))
        sidecar = {"dedup_voxel": self.dedup_voxel,
                   "source_frame_ids": list(self.source_frame_ids),
                   "created_at": self.created_at}
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "BackgroundMap":
        path = Path(path)
        frame = read_frame(path, FrameTag.LEVELED)
        meta = {}
        if sidecar_path(path).exists():
            meta = json.loads(sidecar_path(path).read_text())
        return cls(frame.points,
                   dedup_voxel=float(meta.get("dedup_voxel", DEFAULT_DEDUP_VOXEL)),
                   source_frame_ids=tuple(meta.get("source_frame_ids", ())),
                   created_at=meta.get("created_at", ""))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def build_background(frames: Sequence[PointCloudFrame], dedup_voxel: float = DEFAULT_DEDUP_VOXEL,
                     created_at: str | None = None) -> BackgroundMap:
    """Merge leveled empty-road frames into one voxel-deduplicated point set."""
    if len(frames) == 0:
        raise InvalidParameterError("build_background needs at least one frame")
    for f in frames:
        if f.frame_tag is not FrameTag.LEVELED:
            raise InvalidParameterError(f"frame {f.frame_id} is {f.frame_tag.value}, expected LeveledFrame")
    merged = np.concatenate([f.points for f in frames], axis=0)
    if len(merged) == 0:
        raise InvalidParameterError("background frames contain no points")
    centroids, _ = voxel_centroids(merged, dedup_voxel)
    if created_at is None:
        created_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return BackgroundMap(centroids, dedup_voxel=dedup_voxel,
                         source_frame_ids=tuple(f.frame_id for f in frames), created_at=created_at)


def nearest_background_distance(p, bg: BackgroundMap):
    """Euclidean distance from p (or each row of an (N, 3) array) to the map.

    A bounded first pass answers the bulk of on-road points cheaply; points
    with nothing inside the bound are re-queried unbounded, so the result is
    exact either way.
    """
    q = np.asarray(p, dtype=np.float64)
    bound = max(0.5, 5 * bg.dedup_voxel)
    d, _ = bg.tree.query(q, k=1, distance_upper_bound=bound)
    if np.ndim(d) == 0:
        return d if np.isfinite(d) else bg.tree.query(q, k=1)[0]
    miss = ~np.isfinite(d)
    if miss.any():
        d[miss] = bg.tree.query(q[miss], k=1)[0]
    return d


def adaptive_threshold(d: np.ndarray, params: ForegroundParams) -> tuple[float, float, float]:
    """(mu, sigma, tau) with sigma the population standard deviation."""
    mu = float(d.mean())
    sigma = float(d.std())
    tau = mu + params.alpha * sigma
    if params.clamp:
        tau = min(max(tau, params.tau_min), params.tau_max)
    return mu, sigma, tau


def extract_foreground(frame: PointCloudFrame, bg: BackgroundMap,
                       params: ForegroundParams = ForegroundParams()) -> PointCloudFrame:
    """Keep points whose background distance strictly exceeds tau = mu + alpha * sigma.

    mu, sigma and tau are recomputed for every frame and attached as diagnostics.
    """
    if len(frame) == 0:
        return frame.with_points(frame.points, mu_d=math.nan, sigma_d=math.nan, tau=math.nan)
    d = nearest_background_distance(frame.points, bg)
    mu, sigma, tau = adaptive_threshold(d, params)
    return frame.with_points(frame.points[d > tau], mu_d=mu, sigma_d=sigma, tau=tau)
