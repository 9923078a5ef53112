"""Seeded synthetic roadside scenes for tests and demos.

The scene lives in the leveled sensor frame: the LiDAR sits at the origin,
mount_height above a flat road that runs along +x. Vehicles are boxes whose
sensor-facing faces are sampled as Poisson point sets; the road and poles
are resampled every frame, mimicking a non-repeating scan pattern. Points
are finally tilted by the mounting rotation, so frames on disk are in the
raw sensor frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cloud_ops import TiltAngles, build_rotation
from .cluster import VehicleClass
from .errors import InvalidParameterError
from .frames_io import format_frame

# (length, width, height) in metres
VEHICLE_DIMS = {
    VehicleClass.LONG_TRUCK: (16.0, 2.6, 3.8),
    VehicleClass.COMPACT_TRUCK: (7.5, 2.6, 3.8),
    VehicleClass.NON_TRUCK: (4.5, 1.8, 1.5),
}

EPOCH = 1_700_000_000.0


@dataclass(frozen=True)
class VehicleSpec:
    vehicle_class: VehicleClass
    start: tuple  # (x, y) of the box centre in the leveled frame
    speed: float  # m/s along heading
    heading_deg: float = 180.0  # 180 deg drives toward -x, i.e. toward the sensor

    @classmethod
    def from_dict(cls, d: dict) -> "VehicleSpec":
        extra = set(d) - {"class", "start", "speed", "heading_deg"}
        if extra:
            raise InvalidParameterError(f"vehicle spec: unknown keys {sorted(extra)}")
        return cls(VehicleClass(d["class"]), tuple(float(v) for v in d["start"]), float(d["speed"]),
                   float(d.get("heading_deg", 180.0)))

    def to_dict(self):
        return {"class": self.vehicle_class.value, "start": list(self.start), "speed": self.speed,
                "heading_deg": self.heading_deg}

    @property
    def velocity(self) -> np.ndarray:
        h = math.radians(self.heading_deg)
        return self.speed * np.array([math.cos(h), math.sin(h)])

    def center(self, t: float) -> np.ndarray:
        return np.asarray(self.start, dtype=np.float64) + self.velocity * t


@dataclass(frozen=True)
class SynthSceneParams:
    seed: int = 0
    n_frames: int = 30
    frame_rate_hz: float = 10.0
    truck_specs: tuple = ()
    car_specs: tuple = ()
    background_density: float = 4.0  # points / m^2 of road and pole surface
    noise_sigma_m: float = 0.02
    vehicle_density: float = 5.0
    n_background_frames: int = 10
    mount_height: float = 6.0
    tilt: tuple = (0.02, 0.08)  # (roll, pitch) in radians
    road_x: tuple = (5.0, 200.0)
    road_y: tuple = (-9.0, 9.0)
    pole_xs: tuple = (30.0, 60.0, 90.0, 120.0, 150.0, 180.0)
    pole_y: float = 10.0
    pole_height: float = 7.0
    pole_radius: float = 0.15
    stop_line_x: float = 10.0

    def __post_init__(self):
        if self.n_frames < 0 or self.n_background_frames < 0:
            raise InvalidParameterError("frame counts must be >= 0")
        if not self.frame_rate_hz > 0:
            raise InvalidParameterError("frame_rate_hz must be > 0")
        if self.background_density < 0 or self.vehicle_density < 0 or self.noise_sigma_m < 0:
            raise InvalidParameterError("densities and noise must be >= 0")
        if not self.mount_height > 0:
            raise InvalidParameterError("mount_height must be > 0")
        if self.road_x[0] >= self.road_x[1] or self.road_y[0] >= self.road_y[1]:
            raise InvalidParameterError("road extents must be increasing")
        TiltAngles(*self.tilt)
        for s in self.truck_specs:
            if not s.vehicle_class.is_truck:
                raise InvalidParameterError("truck_specs may only hold truck classes")
        for s in self.car_specs:
            if s.vehicle_class.is_truck:
                raise InvalidParameterError("car_specs may only hold NonTruck vehicles")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSceneParams":
        names = {f for f in cls.__dataclass_fields__}
        extra = set(d) - names
        if extra:
            raise InvalidParameterError(f"synth params: unknown keys {sorted(extra)}")
        kw = dict(d)
        for key in ("truck_specs", "car_specs"):
            if key in kw:
                kw[key] = tuple(VehicleSpec.from_dict(v) for v in kw[key])
        for key in ("tilt", "road_x", "road_y", "pole_xs"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self):
        d = asdict(self)
        d["truck_specs"] = [s.to_dict() for s in self.truck_specs]
        d["car_specs"] = [s.to_dict() for s in self.car_specs]
        return d

    @property
    def ground_z(self) -> float:
        return -self.mount_height

    @property
    def vehicles(self) -> list:
        return list(self.truck_specs) + list(self.car_specs)


def sample_road(rng, p: SynthSceneParams, density: float | None = None) -> np.ndarray:
    density = p.background_density if density is None else density
    (x0, x1), (y0, y1) = p.road_x, p.road_y
    n = rng.poisson(density * (x1 - x0) * (y1 - y0))
    pts = np.empty((n, 3))
    pts[:, 0] = rng.uniform(x0, x1, n)
    pts[:, 1] = rng.uniform(y0, y1, n)
    pts[:, 2] = p.ground_z
    return pts


def sample_poles(rng, p: SynthSceneParams, density: float | None = None) -> np.ndarray:
    density = p.background_density if density is None else density
    out = []
    area = 2 * math.pi * p.pole_radius * p.pole_height
    for x in p.pole_xs:
        n = rng.poisson(density * area)
        ang = rng.uniform(0, 2 * math.pi, n)
        z = rng.uniform(0, p.pole_height, n)
        out.append(np.stack([x + p.pole_radius * np.cos(ang), p.pole_y + p.pole_radius * np.sin(ang),
                             p.ground_z + z], axis=1))
    return np.concatenate(out) if out else np.empty((0, 3))


def sample_background(rng, p: SynthSceneParams, density: float | None = None) -> np.ndarray:
    return np.concatenate([sample_road(rng, p, density), sample_poles(rng, p, density)])


def _box_faces(center_xy, heading, dims, ground_z):
    """(centre, normal, u_axis, v_axis, u_len, v_len) for each face except the bottom."""
    L, W, Hh = dims
    c, s = math.cos(heading), math.sin(heading)
    fwd = np.array([c, s, 0.0])
    left = np.array([-s, c, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    mid = np.array([center_xy[0], center_xy[1], ground_z + Hh / 2])
    return [
        (mid + up * Hh / 2, up, fwd, left, L, W),
        (mid + fwd * L / 2, fwd, left, up, W, Hh),
        (mid - fwd * L / 2, -fwd, left, up, W, Hh),
        (mid + left * W / 2, left, fwd, up, L, Hh),
        (mid - left * W / 2, -left, fwd, up, L, Hh),
    ]


def sample_vehicle(rng, spec: VehicleSpec, t: float, p: SynthSceneParams) -> np.ndarray:
    """Points on the sensor-facing faces of the vehicle box at time t."""
    dims = VEHICLE_DIMS[spec.vehicle_class]
    out = []
    for centre, normal, u, v, ul, vl in _box_faces(spec.center(t), math.radians(spec.heading_deg),
                                                   dims, p.ground_z):
        if float(normal @ -centre) <= 0:  # back face, sensor at origin
            continue
        n = rng.poisson(p.vehicle_density * ul * vl)
        a = rng.uniform(-ul / 2, ul / 2, n)
        b = rng.uniform(-vl / 2, vl / 2, n)
        out.append(centre + a[:, None] * u + b[:, None] * v)
    pts = np.concatenate(out) if out else np.empty((0, 3))
    (x0, x1), (y0, y1) = p.road_x, p.road_y
    inside = (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
    return pts[inside]


def ground_truth_toa(spec: VehicleSpec, t: float, p: SynthSceneParams) -> float | None:
    pos = spec.center(t)
    v = spec.velocity
    speed = float(np.linalg.norm(v))
    if speed == 0 or float(v @ -pos) <= 0:
        return None
    stop = np.array([p.stop_line_x, 0.0])
    return float(np.linalg.norm(stop - pos) / speed)


def _finish(rng, pts: np.ndarray, p: SynthSceneParams, R: np.ndarray) -> np.ndarray:
    if p.noise_sigma_m > 0:
        pts = pts + rng.normal(0.0, p.noise_sigma_m, pts.shape)
    return pts @ R.T  # leveled -> sensor: p_sensor = R p_leveled


def suggested_config(p: SynthSceneParams) -> dict:
    """A pipeline config whose geometry matches the generated scene."""
    (x0, x1), (y0, y1) = p.road_x, p.road_y
    return {
        "tilt": {"roll_phi": p.tilt[0], "pitch_theta": p.tilt[1]},
        "roi": {"polygon_xy": [[x0, y0 - 2], [x1, y0 - 2], [x1, y1 + 2], [x0, y1 + 2]],
                "z_min": p.ground_z - 0.5, "z_max": p.ground_z + 5.0},
        "voxel": {"voxel_size_sv": 0.2},
        "background": {"dedup_voxel": 0.1},
        "foreground": {"alpha": 2.0, "clamp": False},
        "dbscan": {"epsilon": 1.2, "min_pts": 8},
        "classifier": {"min_abs_height_truck": 2.5, "min_hmax_truck": p.ground_z + 2.5,
                       "min_sigma_z_truck": 0.5, "min_length_long": 9.0},
        "site": {"sensor_position": [0.0, 0.0, 0.0], "stop_line_position": [p.stop_line_x, 0.0, p.ground_z],
                 "min_speed": 0.5, "gate_radius": 5.0, "max_missed": 5, "min_hits": 3,
                 "ground_z": p.ground_z, "site_id": "synthetic"},
        "noise": {"q_pos": 0.1, "q_vel": 1.0, "r_std": 0.2},
        "pipeline": {"frame_rate_hz": p.frame_rate_hz, "request_horizon_s": 30.0, "request_cooldown_s": 10.0},
    }


def synth_scene(params: SynthSceneParams, out_dir) -> dict:
    """Write background frames, scene frames, ground truth and a matching config.

    Layout under out_dir: background/, frames/, ground_truth.jsonl,
    annotations.jsonl, config.json, params.json. Returns the written paths.
    """
    out = Path(out_dir)
    (out / "background").mkdir(parents=True, exist_ok=True)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(params.seed)
    R = build_rotation(TiltAngles(*params.tilt))
    dt = 1.0 / params.frame_rate_hz

    n_bg = params.n_background_frames
    for i in range(n_bg):
        ts = EPOCH + (i - n_bg - 10) * dt
        pts = _finish(rng, sample_background(rng, params), params, R)
        (out / "background" / f"bg_{i:06d}.txt").write_text(format_frame(i, ts, pts))

    gt_lines, ann_lines = [], []
    vehicles = params.vehicles
    for i in range(params.n_frames):
        t = i * dt
        ts = EPOCH + t
        parts = [sample_background(rng, params)]
        for vid, spec in enumerate(vehicles):
            parts.append(sample_vehicle(rng, spec, t, params))
            c = spec.center(t)
            h = VEHICLE_DIMS[spec.vehicle_class][2]
            pos = [float(c[0]), float(c[1]), params.ground_z + h / 2]
            gt_lines.append(json.dumps({
                "frame_id": i, "timestamp": ts, "vehicle_id": vid, "class": spec.vehicle_class.value,
                "position": pos, "velocity": [float(v) for v in spec.velocity] + [0.0],
                "toa_s": ground_truth_toa(spec, t, params)}, separators=(",", ":")))
        pts = _finish(rng, np.concatenate(parts), params, R)
        name = f"frame_{i:06d}.txt"
        (out / "frames" / name).write_text(format_frame(i, ts, pts))
        if vehicles and i >= 5 and i % 5 == 0:
            spec = vehicles[0]
            c = spec.center(t)
            h = VEHICLE_DIMS[spec.vehicle_class][2]
            ann_lines.append(json.dumps({
                "scenario_id": f"frame{i}", "frame_file": f"frames/{name}", "frame_id": i,
                "gt_class": spec.vehicle_class.value,
                "gt_position": [float(c[0]), float(c[1]), params.ground_z + h / 2]}))

    (out / "ground_truth.jsonl").write_text("".join(line + "\n" for line in gt_lines))
    (out / "annotations.jsonl").write_text("".join(line + "\n" for line in ann_lines))
    (out / "config.json").write_text(json.dumps(suggested_config(params), indent=2) + "\n")
    (out / "params.json").write_text(json.dumps(params.to_dict(), indent=2) + "\n")
    return {"frames": out / "frames", "background": out / "background",
            "ground_truth": out / "ground_truth.jsonl", "annotations": out / "annotations.jsonl",
            "config": out / "config.json"}
