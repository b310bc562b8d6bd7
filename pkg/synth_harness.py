"""
Deterministic synthetic scene-flow world.

A low-pass random texture is laid around the camera ring once and then only
translated: every frame, the part of the ring right of the partition start
slides outward (clockwise) and the part left of it slides outward
(counterclockwise), each by the columns the scene moved on that side. The
ego path, the texture and the planner errors in the trajectory log all come
from the scenario seed.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from config import ScenarioConfig
from errors import FormatError, KinematicInfeasibleError
from metrics import ClipLog, Command, TrajectoryFrame, TrajectoryLog, read_trajectory_log, write_trajectory_log
from rig_geometry import (
    EgoPose,
    PanoramicRig,
    PartitionLayout,
    SizePower,
    SteeringCircle,
    TurnDirection,
    adjust_sizes,
    partition_frame,
)
from tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

INDEX_NAME = "index.json"
LOG_NAME = "trajectory_log.jsonl"
MANIFEST_NAME = "manifest.json"
HISTORY_FRAMES = 2
LOG_HORIZONS = (1, 2, 3)


@dataclass
class FrameRecord:
    f_img: np.ndarray
    pose: EgoPose
    gt_shift: Tuple[int, int]

    def ring(self) -> np.ndarray:
        """(H, N*W, C) ring columns of this frame."""
        n, h, w, c = self.f_img.shape
        return self.f_img.transpose(1, 0, 2, 3).reshape(h, n * w, c)


@dataclass
class SyntheticSequence:
    """Frames t = 0..T-1, the poses at t = -2 and -1, and the planner log."""

    frames: List[FrameRecord]
    history: List[EgoPose]
    log: TrajectoryLog
    shift_per_frame: Tuple[float, float]
    objects: List[Dict[str, float]] = field(default_factory=list)
    scenario: Optional[ScenarioConfig] = None

    @property
    def poses(self) -> List[EgoPose]:
        return self.history + [f.pose for f in self.frames]

    def pose_history(self, k: int) -> List[EgoPose]:
        """Poses up to and including frame k."""
        return self.poses[: HISTORY_FRAMES + k + 1]


# ----- ego path ------------------------------------------------------------------------


def scenario_circle(scenario: ScenarioConfig) -> SteeringCircle:
    path = scenario.path
    if path.type == "straight":
        return SteeringCircle.straight()
    if path.r <= scenario.ego_width / 2.0:
        raise KinematicInfeasibleError(f"arc radius {path.r} m is within half the ego width {scenario.ego_width} m")
    sign = -1.0 if path.direction == "right" else 1.0
    return SteeringCircle(0.0, sign * path.r, path.r, TurnDirection(path.direction))


def pose_at(scenario: ScenarioConfig, time_s: float) -> Tuple[float, float, float]:
    """World (x, y, yaw) after driving `time_s` seconds from the origin heading +x."""
    path = scenario.path
    distance = path.speed * time_s
    if path.type == "straight":
        return distance, 0.0, 0.0
    phi = distance / path.r
    sign = -1.0 if path.direction == "right" else 1.0
    return path.r * math.sin(phi), sign * (path.r - path.r * math.cos(phi)), sign * phi


def ego_poses(scenario: ScenarioConfig) -> List[EgoPose]:
    dt = scenario.frame_interval
    poses = []
    for t in range(-HISTORY_FRAMES, scenario.horizon):
        x, y, yaw = pose_at(scenario, t * dt)
        poses.append(EgoPose(x=x, y=y, t=t, yaw=yaw))
    return poses


def side_shifts(scenario: ScenarioConfig) -> Tuple[float, float]:
    """Columns per frame the scene slides on the (left, right) side."""
    center = scenario.path.speed * scenario.frame_interval * scenario.pixels_per_meter
    return adjust_sizes(center, scenario_circle(scenario), scenario.ego_width, SizePower.QUADRATIC)


# ----- texture ------------------------------------------------------------------------


def ring_texture(rng: np.random.Generator, height: int, perimeter: int, channels: int, frequency: float) -> np.ndarray:
    """(H, N*W, C) noise low-passed along the ring, zero mean and unit variance."""
    noise = rng.standard_normal((height, perimeter, channels))
    spectrum = np.fft.rfft(noise, axis=1)
    cutoff = max(1, int(frequency * (perimeter // 2)))
    spectrum[:, cutoff + 1 :, :] = 0.0
    smooth = np.fft.irfft(spectrum, n=perimeter, axis=1)
    return (smooth - smooth.mean()) / smooth.std()


def plant_objects(
    rng: np.random.Generator, ring: np.ndarray, count: int, width: int
) -> Tuple[np.ndarray, List[Dict[str, float]]]:
    height, perimeter, channels = ring.shape
    ring = ring.copy()
    objects = []
    for object_id in range(count):
        start = int(rng.integers(0, perimeter))
        signature = 2.0 * rng.standard_normal((height, width, channels))
        columns = (start + np.arange(width)) % perimeter
        ring[:, columns, :] += signature
        objects.append({"object_id": object_id, "ring_position": float(start + width / 2.0) % perimeter})
    return ring, objects


def roll_sides(ring: np.ndarray, layout: PartitionLayout, right_cols: int, left_cols: int) -> np.ndarray:
    """Slide the right region clockwise and the left region counterclockwise, each within itself."""
    perimeter = layout.perimeter
    right = (layout.start_col + np.arange(layout.right_extent)) % perimeter
    left = (layout.start_col + layout.right_extent + np.arange(perimeter - layout.right_extent)) % perimeter
    out = ring.copy()
    out[:, right, :] = np.roll(ring[:, right, :], right_cols, axis=1)
    out[:, left, :] = np.roll(ring[:, left, :], -left_cols, axis=1)
    return out


def ring_to_image(ring: np.ndarray, num_cameras: int) -> np.ndarray:
    height, perimeter, channels = ring.shape
    return ring.reshape(height, num_cameras, perimeter // num_cameras, channels).transpose(1, 0, 2, 3).copy()


# ----- planner log ----------------------------------------------------------------------


def _command(scenario: ScenarioConfig) -> Command:
    if scenario.path.type == "straight":
        return Command.GO_STRAIGHT
    return Command.TURN_RIGHT if scenario.path.direction == "right" else Command.TURN_LEFT


def _ego_offset(scenario: ScenarioConfig, t: int, horizon_s: float) -> np.ndarray:
    x0, y0, yaw = pose_at(scenario, t * scenario.frame_interval)
    x1, y1, _ = pose_at(scenario, t * scenario.frame_interval + horizon_s)
    dx, dy = x1 - x0, y1 - y0
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c * dx + s * dy, -s * dx + c * dy])


def planner_log(scenario: ScenarioConfig, rng: np.random.Generator) -> TrajectoryLog:
    """Exact future ego-frame positions as ground truth; predictions carry a decaying seeded error."""
    frames = []
    for k in range(scenario.horizon):
        heading = rng.uniform(0.0, 2.0 * math.pi)
        error = scenario.planner_error * scenario.planner_decay**k * np.array([math.cos(heading), math.sin(heading)])
        record = {}
        for h in LOG_HORIZONS:
            gt = _ego_offset(scenario, k, float(h))
            pred = gt + error * (h / LOG_HORIZONS[-1])
            record[f"gt_{h}s"] = (float(gt[0]), float(gt[1]))
            record[f"pred_{h}s"] = (float(pred[0]), float(pred[1]))
        record["lateral_3s"] = -record["pred_3s"][1]
        frames.append(TrajectoryFrame(**record))
    return TrajectoryLog(clips=[ClipLog(command=_command(scenario), frames=frames)])


# ----- generation -----------------------------------------------------------------------


def generate_sequence(scenario: ScenarioConfig) -> SyntheticSequence:
    """Render T frames of the translating texture world together with its planner log."""
    rig = PanoramicRig.from_config(scenario.rig)
    scenario_circle(scenario)
    rng = np.random.default_rng(scenario.seed)
    texture = ring_texture(rng, rig.height, rig.perimeter, rig.channels, scenario.texture_frequency)
    texture, objects = plant_objects(rng, texture, scenario.num_objects, min(scenario.object_width, rig.perimeter))
    shift_left, shift_right = side_shifts(scenario)
    poses = ego_poses(scenario)

    frames = []
    ring = texture
    for k in range(scenario.horizon):
        moved = (0, 0)
        if k > 0:
            moved = (
                round(k * shift_left) - round((k - 1) * shift_left),
                round(k * shift_right) - round((k - 1) * shift_right),
            )
            layout = partition_frame(rig, poses[: HISTORY_FRAMES + k + 1], 0, scenario.ego_width).layout
            ring = roll_sides(ring, layout, moved[1], moved[0])
        frames.append(FrameRecord(ring_to_image(ring, rig.num_cameras), poses[HISTORY_FRAMES + k], moved))

    log = planner_log(scenario, rng)
    logger.info(
        f"Generated {len(frames)} frames, shift per frame left={shift_left:.3f} right={shift_right:.3f} columns"
    )
    return SyntheticSequence(frames, poses[:HISTORY_FRAMES], log, (shift_left, shift_right), objects, scenario)


# ----- dataset files ---------------------------------------------------------------------


class FrameEntry(BaseModel):
    file: str
    pose: EgoPose
    gt_shift: Tuple[int, int]


class DatasetIndex(BaseModel):
    frames: List[FrameEntry]
    history: List[EgoPose]
    shift_per_frame: Tuple[float, float]
    objects: List[Dict[str, float]]
    scenario: ScenarioConfig


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(sequence: SyntheticSequence, path: Union[str, Path]) -> Path:
    """Frame tensors, JSON index, trajectory log, and a manifest of SHA-256 hashes."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, frame in enumerate(sequence.frames):
        name = f"frame_{k:03d}.flt"
        write_tensor(directory / name, frame.f_img)
        entries.append(FrameEntry(file=name, pose=frame.pose, gt_shift=frame.gt_shift))
    index = DatasetIndex(
        frames=entries,
        history=sequence.history,
        shift_per_frame=sequence.shift_per_frame,
        objects=sequence.objects,
        scenario=sequence.scenario,
    )
    (directory / INDEX_NAME).write_text(json.dumps(index.model_dump(mode="json", by_alias=True), indent=2, sort_keys=True))
    write_trajectory_log(sequence.log, directory / LOG_NAME)

    files = sorted(p.name for p in directory.iterdir() if p.is_file() and p.name != MANIFEST_NAME)
    manifest = {"files": {name: _sha256(directory / name) for name in files}}
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"Wrote dataset with {len(entries)} frames to {directory}")
    return directory


def read_index(path: Union[str, Path]) -> DatasetIndex:
    index_path = Path(path) / INDEX_NAME
    try:
        return DatasetIndex.model_validate_json(index_path.read_text())
    except FileNotFoundError:
        raise FormatError(f"dataset index not found: {index_path}") from None
    except ValidationError as e:
        raise FormatError(f"{index_path}: invalid dataset index: {e}") from e


def read_dataset(path: Union[str, Path]) -> SyntheticSequence:
    directory = Path(path)
    index = read_index(directory)
    frames = [FrameRecord(read_tensor(directory / entry.file), entry.pose, tuple(entry.gt_shift)) for entry in index.frames]
    shapes = {f.f_img.shape for f in frames}
    if len(shapes) > 1 or any(len(s) != 4 for s in shapes):
        raise FormatError(f"{directory}: frame tensors do not share one (N, H, W, C) shape: {sorted(shapes)}")
    log = read_trajectory_log(directory / LOG_NAME)
    logger.info(f"Read dataset with {len(frames)} frames from {directory}")
    return SyntheticSequence(
        frames, list(index.history), log, tuple(index.shift_per_frame), list(index.objects), index.scenario
    )
