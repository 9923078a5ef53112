"""Pipeline configuration: one JSON document, one section per stage.

Unknown sections or keys are rejected so typos fail at startup.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .background import DEFAULT_DEDUP_VOXEL, ForegroundParams
from .cloud_ops import RegionOfInterest, TiltAngles, VoxelParams
from .cluster import ClassifierThresholds, DbscanParams
from .errors import InvalidParameterError
from .tracker import NoiseParams, SensorSiteConfig

# Recorded in run summaries so alternative orderings can be compared later.
STAGE_ORDER = ("rotate", "crop", "downsample", "foreground", "dbscan", "classify", "track")


@dataclass(frozen=True)
class PipelineConfig:
    tilt: TiltAngles = TiltAngles()
    roi: RegionOfInterest | None = None
    voxel: VoxelParams = VoxelParams()
    dedup_voxel: float = DEFAULT_DEDUP_VOXEL
    foreground: ForegroundParams = ForegroundParams()
    dbscan: DbscanParams = DbscanParams()
    classifier: ClassifierThresholds = ClassifierThresholds()
    site: SensorSiteConfig = SensorSiteConfig()
    noise: NoiseParams = field(default_factory=NoiseParams)
    extrinsic_path: str | None = None
    frame_rate_hz: float = 10.0
    request_horizon_s: float = 30.0
    request_cooldown_s: float = 10.0
    workers: int = 1

    def __post_init__(self):
        if not (self.frame_rate_hz > 0 and math.isfinite(self.frame_rate_hz)):
            raise InvalidParameterError("frame_rate_hz must be > 0")
        if not self.request_horizon_s > 0 or self.request_cooldown_s < 0:
            raise InvalidParameterError("request_horizon_s must be > 0 and request_cooldown_s >= 0")
        if not self.dedup_voxel > 0:
            raise InvalidParameterError("background dedup_voxel must be > 0")
        if self.workers < 1:
            raise InvalidParameterError("workers must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {"tilt", "roi", "voxel", "background", "foreground", "dbscan", "classifier",
                 "site", "noise", "pipeline"}
        _reject_unknown(doc, known, "config")
        kw = {}
        if "tilt" in doc:
            kw["tilt"] = _section(TiltAngles, doc["tilt"], "tilt")
        if doc.get("roi") is not None:
            kw["roi"] = _section(RegionOfInterest, doc["roi"], "roi")
        if "voxel" in doc:
            kw["voxel"] = _section(VoxelParams, doc["voxel"], "voxel")
        if "background" in doc:
            _reject_unknown(doc["background"], {"dedup_voxel"}, "background")
            kw["dedup_voxel"] = float(doc["background"].get("dedup_voxel", DEFAULT_DEDUP_VOXEL))
        if "foreground" in doc:
            kw["foreground"] = _section(ForegroundParams, doc["foreground"], "foreground")
        if "dbscan" in doc:
            kw["dbscan"] = _section(DbscanParams, doc["dbscan"], "dbscan")
        site = _section(SensorSiteConfig, doc.get("site", {}), "site")
        kw["site"] = site
        cls_doc = dict(doc.get("classifier", {}))
        _reject_unknown(cls_doc, {f.name for f in dataclasses.fields(ClassifierThresholds)}, "classifier")
        if cls_doc.get("min_hmax_truck") is None:
            # sensor-relative height gate: 2.5 m above the site's road surface
            cls_doc["min_hmax_truck"] = site.ground_z + 2.5
        kw["classifier"] = ClassifierThresholds(**cls_doc)
        if "noise" in doc:
            kw["noise"] = _noise(doc["noise"])
        if "pipeline" in doc:
            p = doc["pipeline"]
            _reject_unknown(p, {"extrinsic_path", "frame_rate_hz", "request_horizon_s",
                                "request_cooldown_s", "workers"}, "pipeline")
            kw.update(p)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = {
            "tilt": dataclasses.asdict(self.tilt),
            "roi": None if self.roi is None else {"polygon_xy": [list(v) for v in self.roi.polygon_xy],
                                                  "z_min": self.roi.z_min, "z_max": self.roi.z_max},
            "voxel": dataclasses.asdict(self.voxel),
            "background": {"dedup_voxel": self.dedup_voxel},
            "foreground": dataclasses.asdict(self.foreground),
            "dbscan": dataclasses.asdict(self.dbscan),
            "classifier": dataclasses.asdict(self.classifier),
            "site": {**dataclasses.asdict(self.site),
                     "sensor_position": list(self.site.sensor_position),
                     "stop_line_position": list(self.site.stop_line_position)},
            "noise": {"q_pos": self.noise.q_pos, "q_vel": self.noise.q_vel,
                      "R": self.noise.R.tolist()},
            "pipeline": {"extrinsic_path": self.extrinsic_path, "frame_rate_hz": self.frame_rate_hz,
                         "request_horizon_s": self.request_horizon_s,
                         "request_cooldown_s": self.request_cooldown_s, "workers": self.workers},
        }
        if self.noise.Q is not None:
            d["noise"]["Q"] = self.noise.Q.tolist()
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _reject_unknown(doc, allowed, where: str) -> None:
    if not isinstance(doc, dict):
        raise InvalidParameterError(f"{where}: expected an object")
    extra = set(doc) - set(allowed)
    if extra:
        raise InvalidParameterError(f"{where}: unknown keys {sorted(extra)}")


def _section(cls, doc, where: str):
    _reject_unknown(doc, {f.name for f in dataclasses.fields(cls)}, where)
    return cls(**doc)


def _noise(doc) -> NoiseParams:
    _reject_unknown(doc, {"q_pos", "q_vel", "r_std", "R", "Q"}, "noise")
    kw = {k: doc[k] for k in ("q_pos", "q_vel") if k in doc}
    if "R" in doc:
        kw["R"] = np.asarray(doc["R"], dtype=np.float64)
    elif "r_std" in doc:
        kw["R"] = float(doc["r_std"]) ** 2 * np.eye(3)
    if doc.get("Q") is not None:
        kw["Q"] = np.asarray(doc["Q"], dtype=np.float64)
    return NoiseParams(**kw)
