"""
Planning-responsiveness metrics: Frames before Correct Planning (FCP), its
threshold average, the GT-free command-compliance variant, and L2 error.

Clip counts follow the product form literally: the count of a clip is
sum_f prod_{h<=f} 1{miss at frame h}, i.e. the length of the leading run of
missed frames. Metric outputs are the mean over clips.
"""

import csv
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ConfigurationError, FormatError, InvalidInputError

logger = logging.getLogger(__name__)

Point = Tuple[float, float]
DEFAULT_THRESHOLDS = (0.25, 0.5, 0.75)
DEFAULT_HORIZONS = (1, 2, 3)


class Command(str, Enum):
    GO_STRAIGHT = "GoStraight"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"


class TrajectoryFrame(BaseModel):
    """One planning frame; lateral_3s is positive to the right of the ego."""

    model_config = ConfigDict(extra="forbid")

    pred_3s: Point
    gt_3s: Optional[Point] = None
    lateral_3s: Optional[float] = None
    pred_1s: Optional[Point] = None
    pred_2s: Optional[Point] = None
    gt_1s: Optional[Point] = None
    gt_2s: Optional[Point] = None

    def prediction(self, horizon: int) -> Optional[Point]:
        return getattr(self, f"pred_{horizon}s", None)

    def ground_truth(self, horizon: int) -> Optional[Point]:
        return getattr(self, f"gt_{horizon}s", None)


class ClipLog(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: Command
    frames: List[TrajectoryFrame]

    @field_validator("frames")
    @classmethod
    def check_frames(cls, frames):
        if not frames:
            raise ValueError("a clip needs at least one frame")
        return frames


class TrajectoryLog(BaseModel):
    clips: List[ClipLog] = Field(default_factory=list)


class ComplianceRules(BaseModel):
    """Lateral-displacement predicates that decide whether a plan follows its command."""

    model_config = ConfigDict(extra="forbid")

    turn_right_min: float = 2.0
    turn_left_max: float = -2.0
    straight_max_abs: float = 2.0

    def complies(self, command: Command, lateral: float) -> bool:
        if command == Command.TURN_RIGHT:
            return lateral > self.turn_right_min
        if command == Command.TURN_LEFT:
            return lateral < self.turn_left_max
        return abs(lateral) < self.straight_max_abs


def _leading_run(misses: np.ndarray) -> int:
    """sum_f prod_{h<=f} miss_h."""
    return int(np.cumprod(misses.astype(np.int64)).sum())


def _check_log(log: TrajectoryLog) -> None:
    if not log.clips:
        raise InvalidInputError("trajectory log holds no clips")


def _gt_errors(clip: ClipLog, clip_index: int) -> np.ndarray:
    distances = []
    for frame_index, frame in enumerate(clip.frames, start=1):
        if frame.gt_3s is None:
            raise InvalidInputError(f"clip {clip_index} frame {frame_index} has no 3s ground truth")
        distances.append(np.hypot(frame.pred_3s[0] - frame.gt_3s[0], frame.pred_3s[1] - frame.gt_3s[1]))
    return np.asarray(distances)


def fcp_per_clip(log: TrajectoryLog, threshold: float = 0.5) -> List[int]:
    """Frames before the 3s prediction first lands within `threshold` meters of GT, per clip."""
    if threshold <= 0:
        raise ConfigurationError(f"FCP threshold must be positive, got {threshold}")
    _check_log(log)
    return [_leading_run(_gt_errors(clip, i) >= threshold) for i, clip in enumerate(log.clips)]


def fcp(log: TrajectoryLog, threshold: float = 0.5) -> float:
    return float(np.mean(fcp_per_clip(log, threshold)))


def fcp_avg(log: TrajectoryLog, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> float:
    """Integer clip counts summed over every threshold, divided once."""
    if len(thresholds) == 0:
        raise ConfigurationError("fcp_avg needs at least one threshold")
    total = sum(sum(fcp_per_clip(log, t)) for t in thresholds)
    return total / (len(log.clips) * len(thresholds))


def fcp_extended_per_clip(log: TrajectoryLog, q: int, rules: Optional[ComplianceRules] = None) -> List[int]:
    """max(0, leading non-compliant run - q) per clip; needs no ground truth."""
    if q < 1:
        raise ConfigurationError(f"q must be at least 1, got {q}")
    rules = rules or ComplianceRules()
    _check_log(log)
    counts = []
    for clip_index, clip in enumerate(log.clips):
        misses = []
        for frame_index, frame in enumerate(clip.frames, start=1):
            if frame.lateral_3s is None:
                raise InvalidInputError(f"clip {clip_index} frame {frame_index} has no 3s lateral displacement")
            misses.append(not rules.complies(clip.command, frame.lateral_3s))
        counts.append(max(0, _leading_run(np.asarray(misses)) - q))
    return counts


def fcp_extended(log: TrajectoryLog, q: int, rules: Optional[ComplianceRules] = None) -> float:
    return float(np.mean(fcp_extended_per_clip(log, q, rules)))


@dataclass
class L2Report:
    per_horizon: Dict[int, float]

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_horizon.values())))


def l2_error(log: TrajectoryLog, horizons: Sequence[int] = DEFAULT_HORIZONS) -> L2Report:
    """Mean Euclidean displacement per horizon over every frame of every clip."""
    _check_log(log)
    per_horizon = {}
    for horizon in horizons:
        distances = []
        for clip_index, clip in enumerate(log.clips):
            for frame_index, frame in enumerate(clip.frames, start=1):
                pred, gt = frame.prediction(horizon), frame.ground_truth(horizon)
                if pred is None or gt is None:
                    raise InvalidInputError(f"clip {clip_index} frame {frame_index} lacks the {horizon}s horizon")
                distances.append(np.hypot(pred[0] - gt[0], pred[1] - gt[1]))
        per_horizon[horizon] = float(np.mean(distances))
    return L2Report(per_horizon)


def available_horizons(log: TrajectoryLog, horizons: Sequence[int] = DEFAULT_HORIZONS) -> List[int]:
    """Horizons with both prediction and ground truth in every frame."""
    return [
        h
        for h in horizons
        if all(f.prediction(h) is not None and f.ground_truth(h) is not None for clip in log.clips for f in clip.frames)
    ]


# ----- log files ----------------------------------------------------------------


def parse_clip_line(line: str, line_number: int) -> ClipLog:
    """Parse one JSON-lines record into a ClipLog, naming the line on failure."""
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as e:
        raise FormatError(f"line {line_number}: invalid JSON ({e.msg})") from e
    try:
        return ClipLog.model_validate(payload)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise FormatError(f"line {line_number}: {location}: {first['msg']}") from e


def read_trajectory_log(path: Union[str, Path]) -> TrajectoryLog:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise FormatError(f"trajectory log not found: {path}") from None
    clips = [parse_clip_line(line, n) for n, line in enumerate(lines, start=1) if line.strip()]
    logger.info(f"Read {len(clips)} clips from {path}")
    return TrajectoryLog(clips=clips)


def write_trajectory_log(log: TrajectoryLog, path: Union[str, Path]) -> Path:
    path = Path(path)
    with path.open("w") as handle:
        for clip in log.clips:
            handle.write(json.dumps(clip.model_dump(mode="json", exclude_none=True), sort_keys=True) + "\n")
    return path


# ----- metric tables --------------------------------------------------------------


@dataclass
class MetricRow:
    metric: str
    threshold_or_q: str
    value: float


def evaluate_log(
    log: TrajectoryLog,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    q_values: Sequence[int] = (1, 2, 3),
    horizons: Sequence[int] = DEFAULT_HORIZONS,
    rules: Optional[ComplianceRules] = None,
) -> List[MetricRow]:
    """
    Every metric the eval subcommand reports, in output order.

    Overall rows come first, then one block per command present in the log
    (metric names suffixed with ":<command>"). L2 rows cover only the horizons
    every frame carries; the others are skipped with a warning.
    """
    _check_log(log)
    present = available_horizons(log, horizons)
    skipped = [h for h in horizons if h not in present]
    if skipped:
        logger.warning(f"Skipping L2 for horizons {skipped}: not present in every frame")

    rows = _metric_block(log, "", thresholds, q_values, present, rules)
    for command in Command:
        clips = [clip for clip in log.clips if clip.command == command]
        if clips:
            rows.extend(_metric_block(TrajectoryLog(clips=clips), f":{command.value}", thresholds, q_values, present, rules))
    for row in rows:
        logger.info(f"{row.metric}[{row.threshold_or_q}] = {row.value:.4f}")
    return rows


def _metric_block(
    log: TrajectoryLog,
    suffix: str,
    thresholds: Sequence[float],
    q_values: Sequence[int],
    horizons: Sequence[int],
    rules: Optional[ComplianceRules],
) -> List[MetricRow]:
    rows = [MetricRow(f"fcp{suffix}", f"{t:g}", fcp(log, t)) for t in thresholds]
    rows.append(MetricRow(f"fcp_avg{suffix}", "+".join(f"{t:g}" for t in thresholds), fcp_avg(log, thresholds)))
    rows.extend(MetricRow(f"fcp_extended{suffix}", str(q), fcp_extended(log, q, rules)) for q in q_values)
    if horizons:
        report = l2_error(log, horizons)
        rows.extend(MetricRow(f"l2{suffix}", f"{h}s", value) for h, value in report.per_horizon.items())
        rows.append(MetricRow(f"l2{suffix}", "avg", report.average))
    return rows


def write_metrics_csv(rows: Sequence[MetricRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["metric", "threshold_or_q", "value"])
        for row in rows:
            writer.writerow([row.metric, row.threshold_or_q, repr(float(row.value))])
    return path
