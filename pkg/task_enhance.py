"""
Task-aware enhancement from fused flow units.

Object queries attend to the pooled flow units that cover their sampling
points; region features are concatenated with their flow unit and mixed back
to C channels. toy_localization measures what the object enhancement adds on
a small synthetic localization task.
"""

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from config import LocalizationConfig
from errors import ConfigurationError, DimensionError, InvalidInputError
from flow_dynamics import pool_unit
from rig_geometry import FRONT_AXIS, FlowUnitSet, PanoramicRig, PartitionLayout, partition_start, uniform_layout
from tensor_core import Adam, ParamInitializer, ParamSet, Tensor, attention_block, concat, linear
from tensor_io import write_tensor

logger = logging.getLogger(__name__)

MIN_OBJECTS = 50
SAMPLING_OFFSETS = (-0.5, 0.0, 0.5)


@dataclass
class ObjectQuery:
    embedding: Tensor
    points: Sequence[float]

    def __post_init__(self):
        if len(self.points) == 0:
            raise InvalidInputError("an object query needs at least one sampling point")


@dataclass
class RegionFeature:
    feature: Tensor
    unit_index: int


def covering_units(points: Sequence[float], layout: PartitionLayout) -> List[int]:
    """Sorted, deduplicated ring-order indices of the units containing the points."""
    return sorted({layout.unit_index_of(float(s)) for s in points})


def init_enhance_params(init: ParamInitializer, channels: int) -> None:
    init.attention("object.attn", channels)
    init.uniform("region.mix", (2 * channels, channels), 2 * channels)


def object_enhance(q: ObjectQuery, fuse: FlowUnitSet, layout: PartitionLayout, params: ParamSet) -> Tensor:
    """Embedding plus cross-attention onto the pooled covering units; returns width C."""
    indices = covering_units(q.points, layout)
    if not indices:
        raise InvalidInputError("object query has no covering flow units")
    if q.embedding.shape != (fuse.unit_shape[-1],):
        raise DimensionError(f"embedding {q.embedding.shape} does not match unit channels {fuse.unit_shape[-1]}")
    # gather first so only covering units are read
    covering = fuse.ring_order()[np.asarray(indices)]
    tokens = pool_unit(covering)
    query = q.embedding.reshape((1, -1))
    out = attention_block(query, tokens, params, "object.attn", residual=True)
    return out.reshape((q.embedding.shape[0],))


def enhance_queries(
    embeddings: Tensor, tokens: Tensor, index: np.ndarray, mask: np.ndarray, params: ParamSet
) -> Tensor:
    """
    Batched object_enhance over queries with padded covering sets.

    Args:
        embeddings: (M, C) query embeddings
        tokens: (U, C) pooled flow units
        index: (M, K) token rows per query, padded
        mask: (M, K) True where index holds a real covering unit
    """
    if index.shape != mask.shape or index.shape[0] != embeddings.shape[0]:
        raise DimensionError(f"index {index.shape} and mask {mask.shape} do not fit {embeddings.shape[0]} queries")
    if not np.all(mask.any(axis=1)):
        raise InvalidInputError("every query needs at least one covering unit")
    # padded slots read an appended zero row, never a unit outside the covering set
    padded = concat([tokens, Tensor(np.zeros((1, tokens.shape[-1])))], axis=0)
    keys = padded[np.where(mask, index, tokens.shape[0])]
    query = embeddings.reshape((embeddings.shape[0], 1, embeddings.shape[1]))
    out = attention_block(query, keys, params, "object.attn", residual=True, mask=mask[:, None, :])
    return out.reshape(embeddings.shape)


def region_enhance(r: RegionFeature, unit: Tensor, params: ParamSet) -> RegionFeature:
    """Concatenate with the flow unit along channels, then a 1x1 mix from 2C back to C."""
    if r.feature.shape[:-1] != unit.shape[:-1]:
        raise DimensionError(f"region {r.feature.shape} and flow unit {unit.shape} differ in H x P")
    joined = concat([r.feature, unit], axis=-1)
    return RegionFeature(linear(joined, params["region.mix"]), r.unit_index)


# ----- toy localization -------------------------------------------------------------------


class ObjectRecord(BaseModel):
    object_id: int
    ring_position: float
    sampling_points: List[float]
    embedding_file: str
    frame: int


@dataclass
class LocalizationDataset:
    kind: str
    layout: PartitionLayout
    positions: np.ndarray
    frames: np.ndarray
    labels: np.ndarray
    embeddings: np.ndarray
    units: np.ndarray
    points: List[List[float]]

    @property
    def num_classes(self) -> int:
        return 2 * self.layout.units_per_side

    def __len__(self) -> int:
        return len(self.labels)


def make_localization_dataset(config: LocalizationConfig, seed: int) -> LocalizationDataset:
    """
    Objects at random ring positions, labelled with the unit that contains them.

    separable: the embedding carries a one-hot code of the label; units are zero.
    flow_only: embeddings are noise; each frame's fused units carry a per-unit code.
    null: embeddings and units are noise, and sampling points sit around a
    decoy position drawn independently of the label.
    """
    if config.num_objects < MIN_OBJECTS:
        raise ConfigurationError(f"toy localization needs at least {MIN_OBJECTS} objects, got {config.num_objects}")
    rig = PanoramicRig.from_config(config.rig)
    layout = uniform_layout(rig, partition_start(rig, FRONT_AXIS), 0)
    classes = 2 * layout.units_per_side
    channels = rig.channels
    if config.kind != "null" and channels < classes:
        raise ConfigurationError(f"{classes} units need at least {classes} channels for unit codes, rig has {channels}")

    rng = np.random.default_rng(seed)
    m = config.num_objects
    positions = rng.uniform(0.0, rig.perimeter, size=m)
    frames = rng.integers(0, config.num_frames, size=m)
    labels = np.array([layout.unit_index_of(s) for s in positions])
    anchors = rng.uniform(0.0, rig.perimeter, size=m) if config.kind == "null" else positions
    points = [[float((s + d) % rig.perimeter) for d in SAMPLING_OFFSETS] for s in anchors]

    codes = 3.0 * np.eye(classes, channels)
    embeddings = config.noise * rng.standard_normal((m, channels))
    if config.kind == "separable":
        embeddings += codes[labels]

    # fused units in ring order: (frames, 2n, H, P, C)
    unit_shape = (config.num_frames, classes, rig.height, layout.base_size, channels)
    if config.kind == "separable":
        units = np.zeros(unit_shape)
    elif config.kind == "flow_only":
        units = config.noise * rng.standard_normal(unit_shape) + codes[None, :, None, None, :]
    else:
        units = rng.standard_normal(unit_shape)
    return LocalizationDataset(config.kind, layout, positions, frames, labels, embeddings, units, points)


def write_localization_dataset(dataset: LocalizationDataset, directory: Union[str, Path]) -> Path:
    """JSON lines of object records, plus one tensor file per embedding and per frame of units."""
    directory = Path(directory)
    (directory / "embeddings").mkdir(parents=True, exist_ok=True)
    for f in range(dataset.units.shape[0]):
        write_tensor(directory / f"units_{f:03d}.flt", dataset.units[f])
    lines = []
    for i in range(len(dataset)):
        name = f"embeddings/object_{i:04d}.flt"
        write_tensor(directory / name, dataset.embeddings[i])
        record = ObjectRecord(
            object_id=i,
            ring_position=float(dataset.positions[i]),
            sampling_points=dataset.points[i],
            embedding_file=name,
            frame=int(dataset.frames[i]),
        )
        lines.append(json.dumps(record.model_dump(), sort_keys=True))
    path = directory / "objects.jsonl"
    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote {len(dataset)} objects ({dataset.kind}) to {directory}")
    return path


def _covering_matrix(dataset: LocalizationDataset) -> Tuple[np.ndarray, np.ndarray]:
    classes = dataset.num_classes
    covering = [covering_units(p, dataset.layout) for p in dataset.points]
    width = max(len(c) for c in covering)
    index = np.zeros((len(covering), width), dtype=int)
    mask = np.zeros((len(covering), width), dtype=bool)
    for i, (frame, units) in enumerate(zip(dataset.frames, covering)):
        index[i, : len(units)] = frame * classes + np.asarray(units)
        mask[i, : len(units)] = True
    return index, mask


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; the row max is subtracted as a constant."""
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    shifted = logits - shift
    log_norm = shifted.exp().sum(axis=-1).log()
    picked = shifted[np.arange(len(labels)), labels]
    return (log_norm - picked).mean()


class LocalizationReport(BaseModel):
    kind: str
    seed: int
    enhanced_accuracy: float
    baseline_accuracy: float
    chance: float


def _fit_classifier(
    dataset: LocalizationDataset,
    config: LocalizationConfig,
    seed: int,
    enhanced: bool,
    train: np.ndarray,
    test: np.ndarray,
) -> float:
    channels = dataset.embeddings.shape[1]
    init = ParamInitializer(seed)
    init.linear("classifier", channels, dataset.num_classes)
    if enhanced:
        init.attention("object.attn", channels)
    params = init.build()

    embeddings = Tensor(dataset.embeddings)
    tokens = Tensor(pool_unit(Tensor(dataset.units)).data.reshape(-1, channels))
    index, mask = _covering_matrix(dataset)

    def logits(p: ParamSet, rows: np.ndarray) -> Tensor:
        x = embeddings[rows]
        if enhanced:
            x = enhance_queries(x, tokens, index[rows], mask[rows], p)
        return linear(x, p["classifier.weight"], p["classifier.bias"])

    optimizer = Adam(lr=config.lr)
    for _ in range(config.epochs):
        leaves = params.as_leaves()
        cross_entropy(logits(leaves, train), dataset.labels[train]).backward()
        params = optimizer.step(params, leaves.gradients())

    predicted = np.argmax(logits(params, test).data, axis=-1)
    return float(np.mean(predicted == dataset.labels[test]))


def toy_localization(config: LocalizationConfig, seed: int, dataset: Optional[LocalizationDataset] = None) -> LocalizationReport:
    """Train the plain and the flow-enhanced localizer with identical seeds and epochs."""
    dataset = dataset or make_localization_dataset(config, seed)
    order = np.random.default_rng(seed).permutation(len(dataset))
    split = int(round(config.train_fraction * len(dataset)))
    train, test = order[:split], order[split:]
    baseline = _fit_classifier(dataset, config, seed, enhanced=False, train=train, test=test)
    enhanced = _fit_classifier(dataset, config, seed, enhanced=True, train=train, test=test)
    report = LocalizationReport(
        kind=dataset.kind,
        seed=seed,
        enhanced_accuracy=enhanced,
        baseline_accuracy=baseline,
        chance=1.0 / dataset.num_classes,
    )
    logger.info(f"Localization {dataset.kind} seed {seed}: enhanced={enhanced:.3f} baseline={baseline:.3f} chance={report.chance:.3f}")
    return report


def run_localization(config: LocalizationConfig, dump_dir: Optional[Path] = None) -> List[LocalizationReport]:
    """One report per configured seed; with dump_dir each seed's dataset is written under seed_<n>."""
    reports = []
    for seed in config.seeds:
        dataset = make_localization_dataset(config, seed)
        if dump_dir is not None:
            write_localization_dataset(dataset, dump_dir / f"seed_{seed}")
        reports.append(toy_localization(config, seed, dataset))
    return reports


def write_localization_csv(reports: Sequence[LocalizationReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["kind", "seed", "enhanced_accuracy", "baseline_accuracy", "chance"])
        for r in reports:
            writer.writerow([r.kind, r.seed, repr(r.enhanced_accuracy), repr(r.baseline_accuracy), repr(r.chance)])
    return path
