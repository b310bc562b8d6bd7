"""
Ego-guided scene partition on a panoramic camera ring.

The rig is a regular N-gon of identical camera planes around the ego. Ring
coordinate s in [0, N*W) runs clockwise seen from above, starting at the left
edge of the front camera, so the front camera center sits at s = W/2. The ego
frame is x forward, y left.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config import RigConfig
from errors import ConfigurationError, DimensionError, InvalidInputError, KinematicInfeasibleError, StationaryError
from tensor_core import ParamInitializer, ParamSet, Tensor, attention_block, concat, mlp

logger = logging.getLogger(__name__)

COLLINEAR_EPS = 1e-9
FRONT_AXIS = np.array([1.0, 0.0])


class EgoPose(BaseModel):
    """World-frame ego position at frame t; yaw is the heading in radians."""

    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    t: int
    yaw: float = 0.0


class TurnDirection(str, Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class SteeringCircle:
    """Circle through three consecutive poses, or the Straight marker (radius None)."""

    center_x: Optional[float] = None
    center_y: Optional[float] = None
    radius: Optional[float] = None
    turn_direction: Optional[TurnDirection] = None

    @classmethod
    def straight(cls) -> "SteeringCircle":
        return cls()

    @property
    def is_straight(self) -> bool:
        return self.radius is None

    def to_dict(self) -> dict:
        if self.is_straight:
            return {"type": "straight"}
        return {
            "type": "circle",
            "center_x": self.center_x,
            "center_y": self.center_y,
            "radius": self.radius,
            "turn_direction": self.turn_direction.value,
        }


class SizePower(IntEnum):
    LINEAR = 1
    QUADRATIC = 2
    CUBIC = 3

    @classmethod
    def from_name(cls, name: str) -> "SizePower":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ConfigurationError(f"unknown size power '{name}'") from None


@dataclass(frozen=True)
class PanoramicRig:
    num_cameras: int
    width: int
    height: int
    channels: int
    levels: Tuple[int, ...]

    @classmethod
    def from_config(cls, config: RigConfig) -> "PanoramicRig":
        return cls(config.num_cameras, config.width, config.height, config.channels, tuple(config.levels))

    @property
    def perimeter(self) -> int:
        return self.num_cameras * self.width

    @property
    def sector(self) -> float:
        return 2.0 * math.pi / self.num_cameras

    def base_size(self, level: int) -> int:
        if not 0 <= level < len(self.levels):
            raise ConfigurationError(f"level {level} outside the rig's {len(self.levels)} levels")
        return self.levels[level]

    def units_per_side(self, level: int) -> int:
        return self.perimeter // (2 * self.base_size(level))

    def image_shape(self) -> Tuple[int, int, int, int]:
        return (self.num_cameras, self.height, self.width, self.channels)


# ----- steering geometry ----------------------------------------------------------


def fit_steering_circle(p2: EgoPose, p1: EgoPose, p0: EgoPose, eps: float = COLLINEAR_EPS) -> SteeringCircle:
    """
    Circle through the poses at t-2, t-1 and t.

    Solves the two perpendicular-bisector equations
        a*xc + b*yc = c   (between t and t-1)
        e*xc + f*yc = g   (between t-1 and t-2)
    and returns Straight when |e*b - a*f| < eps.
    """
    points = [(p2.x, p2.y), (p1.x, p1.y), (p0.x, p0.y)]
    if len(set(points)) < 3:
        raise InvalidInputError(f"steering circle needs three distinct poses, got {points}")
    (x2, y2), (x1, y1), (x0, y0) = points

    a = 2.0 * (x0 - x1)
    b = 2.0 * (y0 - y1)
    c = x0 * x0 + y0 * y0 - x1 * x1 - y1 * y1
    e = 2.0 * (x1 - x2)
    f = 2.0 * (y1 - y2)
    g = x1 * x1 + y1 * y1 - x2 * x2 - y2 * y2

    den = e * b - a * f
    if abs(den) < eps:
        logger.debug(f"Poses {points} are collinear, treating as straight")
        return SteeringCircle.straight()

    xc = (g * b - c * f) / den
    yc = (a * g - c * e) / (a * f - b * e)
    r = math.hypot(xc - x0, yc - y0)
    # cross of (p1 - p2) and (p0 - p1); counterclockwise motion turns left
    cross = (x1 - x2) * (y0 - y1) - (y1 - y2) * (x0 - x1)
    direction = TurnDirection.LEFT if cross > 0 else TurnDirection.RIGHT
    logger.debug(f"Steering circle center=({xc:.3f}, {yc:.3f}) r={r:.3f} turning {direction.value}")
    return SteeringCircle(xc, yc, r, direction)


def forward_direction(p_prev: EgoPose, p_now: EgoPose) -> np.ndarray:
    delta = np.array([p_now.x - p_prev.x, p_now.y - p_prev.y])
    norm = float(np.hypot(delta[0], delta[1]))
    if norm == 0.0:
        raise StationaryError(f"ego did not move between frames {p_prev.t} and {p_now.t}")
    return delta / norm


def forward_directions(poses: Sequence[EgoPose]) -> List[np.ndarray]:
    """Motion direction per pose; stationary frames reuse the previous direction, the first uses the front axis."""
    directions = [FRONT_AXIS.copy()]
    for prev, now in zip(poses[:-1], poses[1:]):
        try:
            directions.append(forward_direction(prev, now))
        except StationaryError:
            logger.warning(f"Ego stationary at frame {now.t}, reusing the previous forward direction")
            directions.append(directions[-1].copy())
    return directions


def to_rig_frame(direction: np.ndarray, yaw: float) -> np.ndarray:
    """Rotate a world-frame vector into the ego frame of a vehicle heading `yaw`."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c * direction[0] + s * direction[1], -s * direction[0] + c * direction[1]])


def partition_start(rig: PanoramicRig, direction: np.ndarray) -> float:
    """Ring coordinate where a ray from the rig center along `direction` leaves the polygon."""
    n = rig.num_cameras
    phi = (-math.atan2(direction[1], direction[0])) % (2.0 * math.pi)
    plane_raw = math.floor((phi + math.pi / n) / rig.sector)
    delta = phi - plane_raw * rig.sector
    plane = plane_raw % n
    u = 0.5 * rig.width * (1.0 + math.tan(delta) / math.tan(math.pi / n))
    s = (plane * rig.width + u) % rig.perimeter
    return 0.0 if s >= rig.perimeter else s


def ring_direction(rig: PanoramicRig, s: float) -> np.ndarray:
    """Unit ego-frame direction through ring coordinate s; inverse of partition_start."""
    plane, u = divmod(s % rig.perimeter, rig.width)
    delta = math.atan((2.0 * u / rig.width - 1.0) * math.tan(math.pi / rig.num_cameras))
    theta = -(plane * rig.sector + delta)
    return np.array([math.cos(theta), math.sin(theta)])


def adjust_sizes(
    base: float, circle: SteeringCircle, w_ego: float, power: SizePower = SizePower.QUADRATIC
) -> Tuple[float, float]:
    """(p_left, p_right): the outer side of the turn widens, the inner side narrows."""
    if circle.is_straight:
        return float(base), float(base)
    r = circle.radius
    if r <= w_ego / 2.0:
        raise KinematicInfeasibleError(f"steering radius {r:.4f} m is within half the ego width {w_ego} m")
    k = int(power)
    outer = base * ((r + w_ego / 2.0) / r) ** k
    inner = base * ((r - w_ego / 2.0) / r) ** k
    if circle.turn_direction == TurnDirection.RIGHT:
        return outer, inner
    return inner, outer


# ----- layouts -------------------------------------------------------------------


class PartitionLayout(BaseModel):
    """
    Unit boundaries of one partition level.

    ring_boundaries holds 2n+1 unwrapped columns from start_col to
    start_col + N*W; unit g covers [ring_boundaries[g], ring_boundaries[g+1])
    modulo the perimeter. Ring order from the start is right units 0..n-1
    then left units n-1..0, so left unit j has ring index 2n-1-j.
    """

    model_config = ConfigDict(frozen=True)

    start_s: float
    p_left: float
    p_right: float
    level: int
    base_size: int
    perimeter: int
    units_per_side: int
    ring_boundaries: List[int] = Field(min_length=3)

    @property
    def start_col(self) -> int:
        return self.ring_boundaries[0]

    @property
    def right_extent(self) -> int:
        return self.ring_boundaries[self.units_per_side] - self.start_col

    @property
    def right_boundaries(self) -> List[int]:
        return [b % self.perimeter for b in self.ring_boundaries[: self.units_per_side + 1]]

    @property
    def left_boundaries(self) -> List[int]:
        """Left side boundaries from the start outward (counterclockwise)."""
        return [b % self.perimeter for b in reversed(self.ring_boundaries[self.units_per_side :])]

    @property
    def unit_widths(self) -> List[int]:
        return np.diff(self.ring_boundaries).tolist()

    def ring_index(self, side: int, j: int) -> int:
        """Ring-order index of unit j on side 0 (left) or 1 (right)."""
        n = self.units_per_side
        return j if side == 1 else 2 * n - 1 - j

    def unit_index_of(self, s: float) -> int:
        """Ring-order index of the unit containing ring coordinate s."""
        if not 0.0 <= s < self.perimeter:
            raise InvalidInputError(f"ring coordinate {s} outside [0, {self.perimeter})")
        unwrapped = self.start_col + (s - self.start_col) % self.perimeter
        return int(np.searchsorted(self.ring_boundaries, unwrapped, side="right")) - 1

    def column_indices(self) -> np.ndarray:
        """(2n, P) ring columns sampled for each unit, in ring order."""
        bounds = np.asarray(self.ring_boundaries)
        widths = np.diff(bounds)
        offsets = np.floor((np.arange(self.base_size) + 0.5)[None, :] * widths[:, None] / self.base_size).astype(int)
        return (bounds[:-1, None] + offsets) % self.perimeter

    def side_column_indices(self) -> np.ndarray:
        """(2, n, P) sampled columns in FlowUnitSet side order."""
        return self.column_indices()[side_order_index(self.units_per_side)]


def side_order_index(n: int) -> np.ndarray:
    """(2, n) ring indices: row 0 is the left side, row 1 the right, each from the start outward."""
    return np.stack([np.arange(2 * n - 1, n - 1, -1), np.arange(n)])


def ring_order_index(n: int) -> np.ndarray:
    """Flat side-major positions (side * n + j) listed in ring order; inverse of side_order_index."""
    return np.concatenate([n + np.arange(n), np.arange(n - 1, -1, -1)])


def _side_boundaries(extent_start: int, width: float, count: int) -> List[int]:
    return [extent_start + int(math.floor(k * width + 0.5)) for k in range(count)]


def build_layout(rig: PanoramicRig, s: float, p_left: float, p_right: float, level: int) -> PartitionLayout:
    """
    Lay n = N*W / (2P) units per side outward from s.

    The ring splits between the sides in proportion p_right : p_left, so the
    uniform case (p_left == p_right) gives each side exactly half the ring.
    """
    base = rig.base_size(level)
    perimeter = rig.perimeter
    n = rig.units_per_side(level)
    if n < 1:
        raise ConfigurationError(f"level {level} (P={base}) leaves a side with zero units")
    if p_left <= 0 or p_right <= 0:
        raise ConfigurationError(f"partition sizes must be positive, got ({p_left}, {p_right})")

    right_extent = perimeter * p_right / (p_left + p_right)
    w_right = right_extent / n
    w_left = (perimeter - right_extent) / n
    if min(w_left, w_right) < 1.0:
        raise ConfigurationError(
            f"unit widths ({w_left:.3f}, {w_right:.3f}) at level {level} drop below one column"
        )

    start_col = int(math.floor(s)) % perimeter
    right_end = start_col + int(math.floor(right_extent + 0.5))
    ring_end = start_col + perimeter
    right = _side_boundaries(start_col, w_right, n)
    # left side laid backwards from the end of the unwrapped ring
    left = [ring_end - int(math.floor(k * w_left + 0.5)) for k in range(n)]
    boundaries = right + [right_end] + sorted(left)
    if np.any(np.diff(boundaries) <= 0):
        raise ConfigurationError(f"layout at level {level} produced an empty unit: {boundaries}")

    layout = PartitionLayout(
        start_s=float(s),
        p_left=float(p_left),
        p_right=float(p_right),
        level=level,
        base_size=base,
        perimeter=perimeter,
        units_per_side=n,
        ring_boundaries=boundaries,
    )
    logger.debug(f"Level {level} layout start_col={start_col} right_extent={right_end - start_col} widths={layout.unit_widths}")
    return layout


def uniform_layout(rig: PanoramicRig, s: float, level: int) -> PartitionLayout:
    base = rig.base_size(level)
    return build_layout(rig, s, base, base, level)


@dataclass(frozen=True)
class FramePartition:
    """Everything the partition pipeline decides for one frame at one level."""

    direction: np.ndarray
    circle: SteeringCircle
    layout: PartitionLayout


def partition_frame(
    rig: PanoramicRig,
    poses: Sequence[EgoPose],
    level: int,
    w_ego: float,
    power: SizePower = SizePower.QUADRATIC,
) -> FramePartition:
    """
    Partition the current (last) frame of a pose history.

    The history needs at least three poses for the steering circle. A level
    whose adjusted unit width drops below one column falls back to the uniform
    grid.
    """
    if len(poses) < 3:
        raise InvalidInputError(
            f"partition needs at least 3 poses to fit the steering circle through t-2, t-1, t; got {len(poses)}"
        )
    p2, p1, p0 = poses[-3:]
    world_dir = forward_directions(poses)[-1]
    direction = to_rig_frame(world_dir, p0.yaw)
    try:
        circle = fit_steering_circle(p2, p1, p0)
    except InvalidInputError:
        logger.warning(f"Repeated poses around frame {p0.t}, treating the ego path as straight")
        circle = SteeringCircle.straight()

    s = partition_start(rig, direction)
    base = rig.base_size(level)
    p_left, p_right = adjust_sizes(base, circle, w_ego, power)
    try:
        layout = build_layout(rig, s, p_left, p_right, level)
    except ConfigurationError as e:
        logger.warning(f"Level {level} falls back to the uniform grid: {e}")
        layout = build_layout(rig, s, base, base, level)
    logger.debug(f"Frame {p0.t} level {level}: start_s={s:.3f} sizes=({p_left:.3f}, {p_right:.3f})")
    return FramePartition(direction, circle, layout)


def partition_levels(
    rig: PanoramicRig, poses: Sequence[EgoPose], w_ego: float, power: SizePower = SizePower.QUADRATIC
) -> List[FramePartition]:
    return [partition_frame(rig, poses, level, w_ego, power) for level in range(len(rig.levels))]


class PartitionReport(BaseModel):
    """JSON dump of one frame's partition at every level."""

    frame: int
    start_s: float
    direction: List[float]
    circle: Dict[str, Any]
    levels: List[PartitionLayout]

    @classmethod
    def from_partitions(cls, frame: int, partitions: Sequence[FramePartition]) -> "PartitionReport":
        if not partitions:
            raise InvalidInputError("no partition levels to report")
        first = partitions[0]
        return cls(
            frame=frame,
            start_s=first.layout.start_s,
            direction=[float(v) for v in first.direction],
            circle=first.circle.to_dict(),
            levels=[p.layout for p in partitions],
        )


# ----- flow units -------------------------------------------------------------------


@dataclass(frozen=True)
class FlowUnitSet:
    """
    Units of shape (H, P, C) on two sides, stored as one (2, n, H, P, C) tensor.

    Side 0 is the left sequence and side 1 the right; both run from the
    partition start outward.
    """

    data: Tensor

    def __post_init__(self):
        if self.data.ndim != 5 or self.data.shape[0] != 2:
            raise DimensionError(f"flow units need shape (2, n, H, P, C), got {self.data.shape}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def units_per_side(self) -> int:
        return self.data.shape[1]

    @property
    def unit_shape(self) -> Tuple[int, int, int]:
        return self.data.shape[2:]

    @property
    def left(self) -> Tensor:
        return self.data[0]

    @property
    def right(self) -> Tensor:
        return self.data[1]

    def unit(self, side: int, j: int) -> Tensor:
        return self.data[side, j]

    def ring_order(self) -> Tensor:
        """(2n, H, P, C): right units from the start, then left units back toward it."""
        n = self.units_per_side
        flat = self.data.reshape((2 * n,) + self.unit_shape)
        return flat[ring_order_index(n)]

    @classmethod
    def from_ring_order(cls, units: Tensor) -> "FlowUnitSet":
        if units.ndim != 4 or units.shape[0] % 2:
            raise DimensionError(f"ring-ordered units need shape (2n, H, P, C), got {units.shape}")
        return cls(units[side_order_index(units.shape[0] // 2)])

    def detach(self) -> "FlowUnitSet":
        return FlowUnitSet(self.data.detach())


def image_to_ring(f_img: Tensor) -> Tensor:
    """(N, H, W, C) camera features to (H, N*W, C) ring columns."""
    n, h, w, c = f_img.shape
    return f_img.transpose(1, 0, 2, 3).reshape((h, n * w, c))


def partition_features(f_img: Tensor, layout: PartitionLayout, rig: Optional[PanoramicRig] = None) -> FlowUnitSet:
    """Slice ring columns per layout, resampling each unit to the level width by nearest column."""
    if f_img.ndim != 4:
        raise DimensionError(f"camera features need shape (N, H, W, C), got {f_img.shape}")
    if rig is not None and f_img.shape != rig.image_shape():
        raise DimensionError(f"camera features {f_img.shape} do not match rig {rig.image_shape()}")
    if f_img.shape[0] * f_img.shape[2] != layout.perimeter:
        raise DimensionError(f"features cover {f_img.shape[0] * f_img.shape[2]} columns, layout expects {layout.perimeter}")
    ring = image_to_ring(f_img)
    gathered = ring[:, layout.side_column_indices()]
    return FlowUnitSet(gathered.transpose(1, 2, 0, 3, 4))


def partition_columns(ring: np.ndarray, layout: PartitionLayout) -> np.ndarray:
    """numpy twin of partition_features for (H, N*W, C) ring arrays; returns (2, n, H, P, C)."""
    return np.ascontiguousarray(ring[:, layout.side_column_indices()].transpose(1, 2, 0, 3, 4))


# ----- local aggregation --------------------------------------------------------------


def init_aggregation_params(
    init: ParamInitializer,
    base_size: int,
    channels: int,
    aggregation_range: int = 3,
    hidden: Sequence[int] = (),
    prefix: str = "aggregate",
) -> None:
    init.attention(f"{prefix}.attn", channels)
    init.mlp(f"{prefix}.mlp", [aggregation_range * base_size, *hidden, base_size])


def aggregate_ring(
    ring: Tensor,
    aggregation_range: int,
    params: ParamSet,
    prefix: str = "aggregate",
    residual: bool = False,
) -> Tensor:
    """
    Fuse each unit with its ring neighbors; `ring` is (..., 2n, H, P, C) in ring order.

    Neighbors wrap around the closed ring. For every unit the (range) neighbors
    are concatenated along width, every row self-attends over its range*P width
    tokens, and an MLP over the width axis maps range*P back to P.
    """
    if aggregation_range < 1 or aggregation_range % 2 == 0:
        raise ConfigurationError(f"aggregation range must be a positive odd count, got {aggregation_range}")
    count = ring.shape[-4]
    half = aggregation_range // 2
    neighbors = [ring[..., (np.arange(count) + offset) % count, :, :, :] for offset in range(-half, half + 1)]
    window = concat(neighbors, axis=-2) if len(neighbors) > 1 else ring
    mixed = attention_block(window, window, params, f"{prefix}.attn", residual=residual)
    return mlp(mixed.swapaxes(-1, -2), params, f"{prefix}.mlp").swapaxes(-1, -2)


def local_aggregate(
    units: FlowUnitSet,
    aggregation_range: int,
    params: ParamSet,
    prefix: str = "aggregate",
    residual: bool = False,
) -> FlowUnitSet:
    reduced = aggregate_ring(units.ring_order(), aggregation_range, params, prefix, residual)
    return FlowUnitSet.from_ring_order(reduced)
