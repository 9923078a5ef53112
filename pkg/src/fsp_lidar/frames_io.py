"""Plain-text frame files.

One frame per file::

    # frame_id=<int> timestamp=<float>
    x y z
    ...

A stream is a directory of such files, replayed in frame_id order.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .cloud_ops import FrameTag, PointCloudFrame
from .errors import FspLidarError

log = logging.getLogger(__name__)

_HEADER = re.compile(r"^#\s*frame_id=(-?\d+)\s+timestamp=(\S+)\s*$")


class MalformedFrameError(FspLidarError):
    pass


def parse_header(line: str) -> tuple[int, float]:
    m = _HEADER.match(line.strip())
    if not m:
        raise MalformedFrameError(f"bad frame header: {line.strip()[:80]!r}")
    try:
        ts = float(m.group(2))
    except ValueError as exc:
        raise MalformedFrameError(f"bad timestamp in header: {m.group(2)!r}") from exc
    return int(m.group(1)), ts


def read_header(path) -> tuple[int, float]:
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        return parse_header(fh.readline())


def read_frame(path, frame_tag: FrameTag = FrameTag.SENSOR) -> PointCloudFrame:
    text = Path(path).read_text(encoding="ascii", errors="replace")
    header, _, body = text.partition("\n")
    frame_id, ts = parse_header(header)
    try:
        values = np.array(body.split(), dtype=np.float64)
    except ValueError as exc:
        raise MalformedFrameError(f"{path}: non-numeric point data") from exc
    if values.size % 3:
        raise MalformedFrameError(f"{path}: point data is not a multiple of 3 values")
    pts = values.reshape(-1, 3)
    if not np.isfinite(pts).all():
        raise MalformedFrameError(f"{path}: non-finite coordinates")
    return PointCloudFrame(frame_id, ts, pts, frame_tag)


def format_frame(frame_id: int, timestamp: float, points: np.ndarray, precision: int = 6) -> str:
    lines = [f"# frame_id={int(frame_id)} timestamp={float(timestamp)!r}"]
    fmt = f"%.{precision}f %.{precision}f %.{precision}f"
    lines.extend(fmt % (x, y, z) for x, y, z in np.asarray(points, dtype=np.float64))
    return "\n".join(lines) + "\n"


def write_frame(path, frame: PointCloudFrame, precision: int = 6) -> None:
    Path(path).write_text(format_frame(frame.frame_id, frame.timestamp, frame.points, precision),
                          encoding="ascii")


@dataclass
class StreamSummary:
    frames_read: int = 0
    skipped: list = field(default_factory=list)  # (path, reason)

    def to_dict(self):
        return {"frames_read": self.frames_read,
                "frames_skipped": len(self.skipped),
                "skipped": [{"path": str(p), "reason": r} for p, r in self.skipped]}


def iter_frames(directory, summary: StreamSummary | None = None,
                frame_tag: FrameTag = FrameTag.SENSOR) -> Iterator[PointCloudFrame]:
    """Yield frames from `directory` in frame_id order.

    Malformed files and frames whose timestamp does not increase are logged,
    recorded in `summary` and skipped.
    """
    summary = summary if summary is not None else StreamSummary()
    entries = []
    for path in sorted(Path(directory).iterdir()):
        if not path.is_file() or path.name.startswith("."):
            continue
        try:
            fid, _ = read_header(path)
        except (MalformedFrameError, OSError) as exc:
            log.warning("skipping %s: %s", path, exc)
            summary.skipped.append((path, str(exc)))
            continue
        entries.append((fid, path))
    entries.sort(key=lambda e: (e[0], str(e[1])))

    last_ts = None
    last_id = None
    for fid, path in entries:
        try:
            frame = read_frame(path, frame_tag)
        except (MalformedFrameError, OSError) as exc:
            log.warning("skipping %s: %s", path, exc)
            summary.skipped.append((path, str(exc)))
            continue
        if last_id is not None and (fid == last_id or frame.timestamp <= last_ts):
            reason = f"frame {fid} breaks monotone frame_id/timestamp order"
            log.warning("skipping %s: %s", path, reason)
            summary.skipped.append((path, reason))
            continue
        last_id, last_ts = fid, frame.timestamp
        summary.frames_read += 1
        yield frame
