"""Frame-level FSP evaluation and real-time profiling."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cluster import VehicleClass
from .errors import InsufficientDataError, InvalidParameterError


class Outcome(enum.Enum):
    TP = "TP"
    FP = "FP"
    FN = "FN"
    TN = "TN"


@dataclass(frozen=True)
class MatchThresholds:
    long_truck_m: float = 10.0
    compact_truck_m: float = 4.0

    def __post_init__(self):
        if not (self.long_truck_m > 0 and self.compact_truck_m > 0):
            raise InvalidParameterError("match thresholds must be > 0")

    def for_class(self, cls: VehicleClass) -> float:
        if cls is VehicleClass.LONG_TRUCK:
            return self.long_truck_m
        if cls is VehicleClass.COMPACT_TRUCK:
            return self.compact_truck_m
        raise InvalidParameterError("no distance threshold for non-truck ground truth")

    @classmethod
    def parse(cls, text: str) -> "MatchThresholds":
        """Parse "long=10,compact=4"."""
        kw = {}
        for part in text.split(","):
            key, _, value = part.partition("=")
            key = key.strip()
            if key not in ("long", "compact"):
                raise InvalidParameterError(f"unknown threshold key {key!r}")
            kw[f"{key}_truck_m" if key == "long" else "compact_truck_m"] = float(value)
        return cls(**kw)


@dataclass(frozen=True)
class ScenarioAnnotation:
    scenario_id: str
    gt_class: VehicleClass
    gt_position: tuple
    note: str = ""
    frame_file: str | None = None
    frame_id: int | None = None
    threshold_m: float | None = None  # per-scenario override

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioAnnotation":
        return cls(scenario_id=str(d["scenario_id"]),
                   gt_class=VehicleClass(d["gt_class"]),
                   gt_position=tuple(float(v) for v in d["gt_position"]),
                   note=d.get("note", ""),
                   frame_file=d.get("frame_file"),
                   frame_id=d.get("frame_id"),
                   threshold_m=d.get("threshold_m"))


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise InvalidParameterError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def add(self, outcome: Outcome) -> None:
        name = outcome.value.lower()
        setattr(self, name, getattr(self, name) + 1)

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def from_outcomes(cls, outcomes: Iterable[Outcome]) -> "ConfusionCounts":
        c = cls()
        for o in outcomes:
            c.add(o)
        return c

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass(frozen=True)
class MetricsReport:
    """None marks a metric whose denominator is zero."""
    precision: float | None
    recall: float | None
    f1: float | None

    def to_dict(self):
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def match_frame(gt: ScenarioAnnotation, predictions: Sequence[tuple], th: MatchThresholds) -> Outcome:
    """Classify one scenario frame; predictions are (VehicleClass, position) pairs."""
    trucks = [np.asarray(pos, dtype=np.float64) for cls, pos in predictions
              if VehicleClass(cls).is_truck]
    if not gt.gt_class.is_truck:
        return Outcome.FP if trucks else Outcome.TN
    if not trucks:
        return Outcome.FN
    limit = gt.threshold_m if gt.threshold_m is not None else th.for_class(gt.gt_class)
    nearest = min(float(np.linalg.norm(p - np.asarray(gt.gt_position))) for p in trucks)
    return Outcome.TP if nearest <= limit else Outcome.FN


def compute_metrics(c: ConfusionCounts) -> MetricsReport:
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else None
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricsReport(precision, recall, f1)


def format_metrics_table(m: MetricsReport) -> str:
    def cell(v):
        return "undefined" if v is None else f"{v:.2f}"
    rows = [("Precision", "Recall", "F1 Score"), tuple(cell(v) for v in (m.precision, m.recall, m.f1))]
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    return "\n".join("  ".join(r[i].ljust(widths[i]) for i in range(3)).rstrip() for r in rows) + "\n"


def load_annotations(path) -> list[ScenarioAnnotation]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(ScenarioAnnotation.from_dict(json.loads(line)))
    return out


def evaluate(annotations: Sequence[ScenarioAnnotation], predictions_by_frame: dict,
             th: MatchThresholds) -> tuple[ConfusionCounts, list[dict]]:
    """Score annotated frames against predictions keyed by frame_id."""
    counts = ConfusionCounts()
    rows = []
    for ann in annotations:
        preds = predictions_by_frame.get(ann.frame_id, [])
        outcome = match_frame(ann, preds, th)
        counts.add(outcome)
        rows.append({"scenario_id": ann.scenario_id, "frame_id": ann.frame_id,
                     "gt_class": ann.gt_class.value, "outcome": outcome.value})
    return counts, rows


@dataclass(frozen=True)
class TimingSample:
    frame_id: int
    foreground_point_count: int
    processing_seconds: float

    def __post_init__(self):
        if not self.processing_seconds > 0:
            raise InvalidParameterError("processing_seconds must be > 0")


@dataclass(frozen=True)
class ProfileReport:
    n_frames: int
    budget_seconds: float
    mean_seconds: float
    max_seconds: float
    p99_seconds: float
    fraction_over_budget: float
    correlation: float | None
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("n_frames", "budget_seconds", "mean_seconds", "max_seconds",
                                             "p99_seconds", "fraction_over_budget", "correlation")}
        d.update(self.extras)
        return d


def pearson(x, y) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0:
        return None
    return float(dx @ dy) / denom


def profile_report(samples: Sequence[TimingSample], budget_seconds: float = 0.05) -> ProfileReport:
    if not samples:
        raise InsufficientDataError("profile_report needs at least one timing sample")
    t = np.array([s.processing_seconds for s in samples])
    n = np.array([s.foreground_point_count for s in samples])
    return ProfileReport(
        n_frames=len(samples),
        budget_seconds=budget_seconds,
        mean_seconds=float(t.mean()),
        max_seconds=float(t.max()),
        p99_seconds=float(np.percentile(t, 99)),
        fraction_over_budget=float((t > budget_seconds).mean()),
        correlation=pearson(n, t) if len(samples) > 1 else None,
    )


TIMING_COLUMNS = ("frame_id", "foreground_points", "processing_seconds")


def write_timing_csv(path, samples: Iterable[TimingSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_COLUMNS)
        for s in samples:
            w.writerow([s.frame_id, s.foreground_point_count, f"{s.processing_seconds:.9f}"])


def read_timing_csv(path) -> list[TimingSample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(TIMING_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise InvalidParameterError(f"{path}: missing timing columns {sorted(missing)}")
        return [TimingSample(int(r["frame_id"]), int(r["foreground_points"]), float(r["processing_seconds"]))
                for r in reader]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
