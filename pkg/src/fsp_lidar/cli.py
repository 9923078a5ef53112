"""Command-line entry point: ``fsp-lidar <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import fsp_eval
from .background import BackgroundMap
from .config import STAGE_ORDER, PipelineConfig
from .errors import FspLidarError
from .frames_io import StreamSummary, iter_frames, read_header
from .georeg import (DEFAULT_SPACING, CalibrationArtifact, EnuReference, ErrorReport, GeodeticCoord,
                     compose_final, estimate_static_extrinsic, load_correspondences, load_gps_trajectory,
                     load_lidar_trajectory, refine_planar_and_vertical_multi, resample_by_arclength,
                     static_registration_error, trajectory_alignment_error)
from .pipeline import (FspRequestEmitter, build_background_from_frames, predictions_by_frame,
                       read_records, run_detect)
from .synth import SynthSceneParams, synth_scene

log = logging.getLogger("fsp_lidar")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def cmd_detect(args) -> int:
    config = PipelineConfig.load(args.config)
    background = BackgroundMap.load(args.background)
    extrinsic = args.extrinsic or config.extrinsic_path
    calibration = CalibrationArtifact.load(extrinsic) if extrinsic else None
    summary = StreamSummary()
    emitter = FspRequestEmitter(config)
    timings = []
    n_records = n_requests = 0
    req_fh = open(args.requests, "w") if args.requests else None
    try:
        with open(args.out, "w") as out:
            for result in run_detect(config, iter_frames(args.frames, summary), background, calibration):
                timings.append(result.timing)
                for rec in result.records:
                    out.write(rec.to_json() + "\n")
                    n_records += 1
                    msg = emitter.emit(rec)
                    if msg is not None:
                        n_requests += 1
                        if req_fh:
                            req_fh.write(msg.to_json() + "\n")
    finally:
        if req_fh:
            req_fh.close()
    if args.timing:
        fsp_eval.write_timing_csv(args.timing, timings)
    report = {**summary.to_dict(), "records": n_records, "requests": n_requests,
              "stage_order": list(STAGE_ORDER)}
    print(json.dumps(report, indent=2), file=sys.stderr)
    return 0


def cmd_build_background(args) -> int:
    config = PipelineConfig.load(args.config)
    summary = StreamSummary()
    bg = build_background_from_frames(config, iter_frames(args.frames, summary))
    bg.save(args.out)
    print(json.dumps({**summary.to_dict(), "background_points": len(bg)}, indent=2), file=sys.stderr)
    return 0


def cmd_calibrate_static(args) -> int:
    ref = EnuReference(GeodeticCoord.parse(args.enu_origin))
    pairs = load_correspondences(args.pairs, ref)
    tf = estimate_static_extrinsic(pairs)
    err = static_registration_error(pairs, tf)
    art = CalibrationArtifact(ref, tf, static_error=err.summary(), created_at=_now())
    art.save(args.out)
    print(json.dumps({"static_error": err.summary(), "per_point": err.per_point.tolist()}, indent=2),
          file=sys.stderr)
    return 0


def cmd_calibrate_trajectory(args) -> int:
    if len(args.lidar_traj) != len(args.gps_traj):
        raise FspLidarError("--lidar-traj and --gps-traj must be given the same number of times")
    initial = CalibrationArtifact.load(args.extrinsic)
    ref = initial.enu_reference
    pairs = []
    for lidar_path, gps_path in zip(args.lidar_traj, args.gps_traj):
        lidar_enu = initial.transform.apply(load_lidar_trajectory(lidar_path))
        gps_enu = load_gps_trajectory(gps_path, ref)
        pairs.append((resample_by_arclength(lidar_enu, args.spacing),
                      resample_by_arclength(gps_enu, args.spacing)))
    refine = refine_planar_and_vertical_multi(pairs)
    final = compose_final(initial.transform, refine)
    step = refine.as_transform()
    per_traj, after_errors = [], []
    for (lid, gps), lidar_path in zip(pairs, args.lidar_traj):
        before = trajectory_alignment_error(lid, gps)
        after = trajectory_alignment_error(step.apply(lid.positions), gps)
        after_errors.append(after.per_point)
        per_traj.append({"lidar_traj": str(lidar_path), "before": before.summary(), "after": after.summary()})
    after_all = ErrorReport.from_errors(np.concatenate(after_errors)).summary()
    art = CalibrationArtifact(ref, final, static_error=initial.static_error,
                              trajectory_error=after_all, created_at=_now())
    art.save(args.out)
    report = {"refinement": {"theta_yaw": refine.theta_yaw, "t_xy": list(refine.t_xy),
                             "delta_z": refine.delta_z},
              "spacing": args.spacing, "trajectories": per_traj, "trajectory_error": after_all,
              "static_error": initial.static_error}
    fsp_eval.write_json(args.report, report)
    return 0


def cmd_eval_fsp(args) -> int:
    th = fsp_eval.MatchThresholds.parse(args.thresholds)
    annotations = fsp_eval.load_annotations(args.annotations)
    base = Path(args.annotations).parent
    resolved = []
    for ann in annotations:
        if ann.frame_id is None:
            if ann.frame_file is None:
                raise FspLidarError(f"scenario {ann.scenario_id}: needs frame_id or frame_file")
            fid, _ = read_header(base / ann.frame_file)
            ann = fsp_eval.ScenarioAnnotation(**{**ann.__dict__, "frame_id": fid})
        resolved.append(ann)
    preds = predictions_by_frame(read_records(args.records))
    counts, rows = fsp_eval.evaluate(resolved, preds, th)
    metrics = fsp_eval.compute_metrics(counts)
    report = {"counts": counts.to_dict(), "metrics": metrics.to_dict(),
              "thresholds": {"long_truck_m": th.long_truck_m, "compact_truck_m": th.compact_truck_m},
              "scenarios": rows}
    fsp_eval.write_json(args.out, report)
    sys.stdout.write(fsp_eval.format_metrics_table(metrics))
    return 0


def cmd_profile(args) -> int:
    report = fsp_eval.profile_report(fsp_eval.read_timing_csv(args.timing), args.budget)
    fsp_eval.write_json(args.out, report.to_dict())
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_synth(args) -> int:
    params = SynthSceneParams.from_dict(json.loads(Path(args.params).read_text()))
    paths = synth_scene(params, args.out_dir)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return 0


def cmd_forward(args) -> int:
    """Relay JSON-lines records from one site's file to another consumer.

    Each line is validated as JSON before it is passed on. With --follow the
    input is tailed until --idle-timeout seconds pass without new data.
    """
    out = sys.stdout if args.out == "-" else open(args.out, "a")
    n = 0
    try:
        with open(args.in_path) as src:
            idle_since = time.monotonic()
            pending = ""
            while True:
                chunk = src.readline()
                if chunk:
                    pending += chunk
                    if not pending.endswith("\n"):
                        continue
                    line, pending = pending.strip(), ""
                    if line:
                        json.loads(line)
                        out.write(line + "\n")
                        out.flush()
                        n += 1
                    idle_since = time.monotonic()
                    continue
                if not args.follow or time.monotonic() - idle_since > args.idle_timeout:
                    if pending.strip():  # final line without a newline
                        json.loads(pending)
                        out.write(pending.strip() + "\n")
                        n += 1
                    break
                time.sleep(args.poll)
    finally:
        if out is not sys.stdout:
            out.close()
    print(json.dumps({"forwarded": n}), file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fsp-lidar", description="Roadside LiDAR truck detection for FSP")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="run the detection/tracking pipeline over a frame directory")
    p.add_argument("--config", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--background", required=True)
    p.add_argument("--extrinsic")
    p.add_argument("--out", required=True)
    p.add_argument("--requests")
    p.add_argument("--timing")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("build-background", help="merge empty-road frames into a background map")
    p.add_argument("--config", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_background)

    p = sub.add_parser("calibrate-static", help="LiDAR->ENU extrinsic from static point pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--enu-origin", required=True, help="lat,lon,alt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate_static)

    p = sub.add_parser("calibrate-trajectory", help="refine an extrinsic with vehicle trajectories")
    p.add_argument("--extrinsic", required=True)
    p.add_argument("--lidar-traj", nargs="+", action="extend", required=True)
    p.add_argument("--gps-traj", nargs="+", action="extend", required=True)
    p.add_argument("--spacing", type=float, default=DEFAULT_SPACING)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_calibrate_trajectory)

    p = sub.add_parser("eval-fsp", help="frame-level precision/recall/F1")
    p.add_argument("--annotations", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--thresholds", default="long=10,compact=4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_fsp)

    p = sub.add_parser("profile", help="per-frame timing report")
    p.add_argument("--timing", required=True)
    p.add_argument("--budget", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("synth", help="generate a seeded synthetic scene")
    p.add_argument("--params", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("forward", help="relay a site's record stream to another consumer")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True, help="output path, or - for stdout")
    p.add_argument("--follow", action="store_true")
    p.add_argument("--poll", type=float, default=0.1)
    p.add_argument("--idle-timeout", type=float, default=5.0)
    p.set_defaults(func=cmd_forward)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FspLidarError, OSError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
