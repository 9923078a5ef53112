"""Frame-to-record orchestration and FSP request emission."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .background import BackgroundMap, extract_foreground
from .cloud_ops import FrameTag, PointCloudFrame, build_rotation, correct_frame, crop_roi, voxel_downsample
from .cluster import Cluster, VehicleClass, detect_objects
from .config import STAGE_ORDER, PipelineConfig
from .errors import FspLidarError
from .fsp_eval import TimingSample
from .georeg import CalibrationArtifact, enu_to_geodetic
from .tracker import Direction, MultiObjectTracker, Track, estimate_toa, horizontal_speed, is_reportable

log = logging.getLogger(__name__)


class StartupError(FspLidarError):
    pass


def _r(v, nd=6):
    return None if v is None else round(float(v), nd)


@dataclass(frozen=True)
class DetectionRecord:
    frame_id: int
    timestamp: float
    track_id: int
    vehicle_class: VehicleClass
    position_lidar: tuple
    speed_mps: float
    direction: Direction
    toa_s: float | None = None
    position_enu: tuple | None = None
    position_geodetic: tuple | None = None

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "timestamp": self.timestamp,
            "track_id": self.track_id,
            "vehicle_class": self.vehicle_class.value,
            "position_lidar": [_r(v) for v in self.position_lidar],
            "position_enu": None if self.position_enu is None else [_r(v) for v in self.position_enu],
            "position_geodetic": None if self.position_geodetic is None else
            {"lat": _r(self.position_geodetic[0], 9), "lon": _r(self.position_geodetic[1], 9),
             "alt": _r(self.position_geodetic[2])},
            "speed_mps": _r(self.speed_mps),
            "direction": self.direction.value,
            "toa_s": _r(self.toa_s),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionRecord":
        geo = d.get("position_geodetic")
        return cls(
            frame_id=int(d["frame_id"]), timestamp=float(d["timestamp"]), track_id=int(d["track_id"]),
            vehicle_class=VehicleClass(d["vehicle_class"]),
            position_lidar=tuple(d["position_lidar"]), speed_mps=float(d["speed_mps"]),
            direction=Direction(d["direction"]), toa_s=d.get("toa_s"),
            position_enu=None if d.get("position_enu") is None else tuple(d["position_enu"]),
            position_geodetic=None if geo is None else (geo["lat"], geo["lon"], geo["alt"]),
        )


@dataclass(frozen=True)
class FSPRequestMessage:
    site_id: str
    track_id: int
    vehicle_class: VehicleClass
    toa_s: float
    issued_at: float
    sequence_number: int
    frame_id: int  # the DetectionRecord this request came from

    def to_dict(self) -> dict:
        return {"site_id": self.site_id, "track_id": self.track_id,
                "vehicle_class": self.vehicle_class.value, "toa_s": _r(self.toa_s),
                "issued_at": self.issued_at, "sequence_number": self.sequence_number,
                "frame_id": self.frame_id}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


class FspRequestEmitter:
    """Turns detection records into priority requests for one site."""

    def __init__(self, config: PipelineConfig):
        self.site_id = config.site.site_id
        self.horizon = config.request_horizon_s
        self.cooldown = config.request_cooldown_s
        self.sequence = 0
        self.last_issued: dict[int, float] = {}

    def emit(self, record: DetectionRecord) -> FSPRequestMessage | None:
        if not record.vehicle_class.is_truck:
            return None
        if record.direction is not Direction.APPROACHING:
            return None
        if record.toa_s is None or record.toa_s > self.horizon:
            return None
        last = self.last_issued.get(record.track_id)
        if last is not None and record.timestamp - last < self.cooldown:
            return None
        self.sequence += 1
        self.last_issued[record.track_id] = record.timestamp
        return FSPRequestMessage(self.site_id, record.track_id, record.vehicle_class, float(record.toa_s),
                                 record.timestamp, self.sequence, record.frame_id)


def emit_fsp_request(record: DetectionRecord, config: PipelineConfig,
                     state: FspRequestEmitter) -> FSPRequestMessage | None:
    return state.emit(record)


@dataclass
class FrameResult:
    frame_id: int
    timestamp: float
    records: list
    timing: TimingSample
    n_clusters: int
    diagnostics: dict = field(default_factory=dict)


class DetectionPipeline:
    """Stateless per-frame stages plus the single stateful tracker."""

    def __init__(self, config: PipelineConfig, background: BackgroundMap | None,
                 calibration: CalibrationArtifact | None = None):
        if background is None:
            raise StartupError("a background map is required; build one with build-background")
        self.config = config
        self.background = background
        self.calibration = calibration
        self.R = build_rotation(config.tilt)
        self.tracker = MultiObjectTracker(config.site, config.noise, default_dt=1.0 / config.frame_rate_hz)

    def level(self, frame: PointCloudFrame) -> PointCloudFrame:
        """Rotate and crop; shared with background construction."""
        leveled = correct_frame(frame, self.R) if frame.frame_tag is FrameTag.SENSOR else frame
        if self.config.roi is not None:
            leveled = crop_roi(leveled, self.config.roi)
        return leveled

    def detect(self, frame: PointCloudFrame) -> tuple[list[Cluster], PointCloudFrame, float]:
        """Per-frame stateless stages; returns (clusters, foreground, elapsed seconds)."""
        t0 = time.perf_counter()
        cfg = self.config
        down = voxel_downsample(self.level(frame), cfg.voxel)
        fg = extract_foreground(down, self.background, cfg.foreground)
        clusters = detect_objects(fg.points, cfg.dbscan, cfg.classifier)
        return clusters, fg, time.perf_counter() - t0

    def track(self, frame: PointCloudFrame, clusters: list[Cluster]) -> list[DetectionRecord]:
        tracks = self.tracker.step(clusters, frame.timestamp)
        return [self._record(frame, t) for t in tracks if is_reportable(t, self.config.site)]

    def _record(self, frame: PointCloudFrame, t: Track) -> DetectionRecord:
        site = self.config.site
        enu = geo = None
        if self.calibration is not None:
            enu_arr = self.calibration.transform.apply(t.position)
            enu = tuple(float(v) for v in enu_arr)
            geo = tuple(float(v) for v in enu_to_geodetic(enu_arr, self.calibration.enu_reference))
        return DetectionRecord(
            frame_id=frame.frame_id, timestamp=frame.timestamp, track_id=t.track_id,
            vehicle_class=t.vehicle_class, position_lidar=tuple(float(v) for v in t.position),
            speed_mps=horizontal_speed(t), direction=t.direction, toa_s=estimate_toa(t, site),
            position_enu=enu, position_geodetic=geo)

    def process(self, frame: PointCloudFrame, detected=None) -> FrameResult:
        clusters, fg, elapsed = detected if detected is not None else self.detect(frame)
        t0 = time.perf_counter()
        records = self.track(frame, clusters)
        elapsed += time.perf_counter() - t0
        timing = TimingSample(frame.frame_id, len(fg), max(elapsed, 1e-9))
        return FrameResult(frame.frame_id, frame.timestamp, records, timing, len(clusters),
                           dict(fg.diagnostics))


def run_detect(config: PipelineConfig, frames: Iterable[PointCloudFrame], background: BackgroundMap | None,
               calibration: CalibrationArtifact | None = None) -> Iterator[FrameResult]:
    """Run the full pipeline, yielding one FrameResult per frame in input order.

    With config.workers > 1 the stateless stages run in a thread pool; the
    tracker still sees frames strictly in order.
    """
    pipe = DetectionPipeline(config, background, calibration)
    log.debug("stage order: %s", " -> ".join(STAGE_ORDER))
    if config.workers == 1:
        for frame in frames:
            yield pipe.process(frame)
        return
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        frames = list(frames)
        for frame, detected in zip(frames, pool.map(pipe.detect, frames)):
            yield pipe.process(frame, detected)


def build_background_from_frames(config: PipelineConfig, frames: Iterable[PointCloudFrame]):
    """Level and crop raw empty-road frames exactly like run_detect, then merge."""
    from .background import build_background

    R = build_rotation(config.tilt)
    leveled = []
    for f in frames:
        lf = correct_frame(f, R) if f.frame_tag is FrameTag.SENSOR else f
        if config.roi is not None:
            lf = crop_roi(lf, config.roi)
        leveled.append(lf)
    return build_background(leveled, config.dedup_voxel)


def read_records(path) -> list[DetectionRecord]:
    with open(path) as fh:
        return [DetectionRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def predictions_by_frame(records: Iterable[DetectionRecord]) -> dict:
    out: dict[int, list] = {}
    for r in records:
        out.setdefault(r.frame_id, []).append((r.vehicle_class, np.asarray(r.position_lidar)))
    return out
