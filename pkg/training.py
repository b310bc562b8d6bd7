"""
Training loop for the flow modules on a synthetic dataset.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import FlowModelConfig, TrainingConfig
from errors import ConfigurationError, NumericFailure
from flow_dynamics import MultiLevelFlowModel, SceneFlowModel
from rig_geometry import FlowUnitSet, PanoramicRig, SizePower, partition_columns, partition_frame
from synth_harness import SyntheticSequence
from tensor_core import Adam, ParamSet, Tensor, optimizer_step
from tensor_io import save_checkpoint

logger = logging.getLogger(__name__)

LOSS_CSV_NAME = "loss.csv"
CHECKPOINT_DIR = "checkpoint"


def partition_sequence(
    sequence: SyntheticSequence, rig: PanoramicRig, level: int, w_ego: float, power: SizePower = SizePower.QUADRATIC
) -> np.ndarray:
    """Partition every frame with its own pose history; returns (T, 2, n, H, P, C)."""
    units = []
    for k, frame in enumerate(sequence.frames):
        layout = partition_frame(rig, sequence.pose_history(k), level, w_ego, power).layout
        units.append(partition_columns(frame.ring(), layout))
    return np.stack(units)


def partition_sequence_levels(
    sequence: SyntheticSequence, rig: PanoramicRig, levels: Sequence[int], w_ego: float, power: SizePower = SizePower.QUADRATIC
) -> Dict[int, np.ndarray]:
    return {level: partition_sequence(sequence, rig, level, w_ego, power) for level in levels}


@dataclass
class TrainingResult:
    params: ParamSet
    history: List[Tuple[float, float, float]]
    initial_loss: Optional[float]
    final_loss: float


class FlowTrainer:
    """Runs optimizer steps over one partitioned sequence and records the loss curve."""

    def __init__(self, model: Union[SceneFlowModel, MultiLevelFlowModel], config: TrainingConfig):
        self.model = model
        self.config = config
        if config.optimizer == "adam":
            self.optimizer = Adam(lr=config.lr)
        elif config.optimizer == "sgd":
            self.optimizer = None
        else:
            raise ConfigurationError(f"unknown optimizer '{config.optimizer}'")

    def loss_and_grads(self, params: ParamSet, units: Tensor):
        leaves = params.as_leaves()
        losses = self.model.losses(leaves, units, self.config.lambda_spat, self.config.lambda_tem)
        losses.total.backward()
        return losses.values(), leaves.gradients()

    def step(self, params: ParamSet, grads) -> ParamSet:
        if self.optimizer is None:
            return optimizer_step(params, grads, self.config.lr)
        return self.optimizer.step(params, grads)

    def evaluate(self, params: ParamSet, units: Tensor) -> float:
        return self.model.losses(params, units, self.config.lambda_spat, self.config.lambda_tem).total.item()

    def train(self, params: ParamSet, raw_units: Union[np.ndarray, Mapping[int, np.ndarray]]) -> TrainingResult:
        if isinstance(raw_units, Mapping):
            units = {level: Tensor(value) for level, value in raw_units.items()}
        else:
            units = Tensor(raw_units)
        history = []
        logger.info(f"Training for {self.config.steps} steps with {self.config.optimizer} (lr={self.config.lr})")
        for step in range(self.config.steps):
            values, grads = self.loss_and_grads(params, units)
            if not np.all(np.isfinite(values)):
                raise NumericFailure(f"non-finite loss at step {step}: spatial={values[0]}, temporal={values[1]}")
            history.append(values)
            if step % self.config.log_every == 0:
                logger.info(f"Step {step}: L_spat={values[0]:.6f} L_tem={values[1]:.6f} total={values[2]:.6f}")
            params = self.step(params, grads)

        final = self.evaluate(params, units)
        if not np.isfinite(final):
            raise NumericFailure(f"non-finite loss after step {self.config.steps}")
        initial = history[0][2] if history else None
        if initial is not None:
            logger.info(f"Training done: total loss {initial:.6f} -> {final:.6f}")
        return TrainingResult(params, history, initial, final)


def write_loss_csv(history: List[Tuple[float, float, float]], path: Union[str, Path]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["step", "L_spat", "L_tem", "total"])
        for step, (l_spat, l_tem, total) in enumerate(history):
            writer.writerow([step, repr(l_spat), repr(l_tem), repr(total)])
    return path


def train_on_sequence(
    sequence: SyntheticSequence,
    rig: PanoramicRig,
    model_config: FlowModelConfig,
    training: TrainingConfig,
    w_ego: float,
    out_dir: Optional[Path] = None,
) -> TrainingResult:
    """Partition at every model level, train jointly, and (with out_dir) write the loss curve and checkpoint."""
    raw_units = partition_sequence_levels(sequence, rig, model_config.levels, w_ego, SizePower.from_name(model_config.size_power))
    model = MultiLevelFlowModel(rig, model_config, horizon=len(sequence.frames))
    params = model.init_params(training.seed)
    result = FlowTrainer(model, training).train(params, raw_units)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_csv(result.history, out_dir / LOSS_CSV_NAME)
        save_checkpoint(result.params, out_dir / CHECKPOINT_DIR)
    return result


def encode_scene(
    sequence: SyntheticSequence,
    rig: PanoramicRig,
    model_config: FlowModelConfig,
    params: ParamSet,
    w_ego: float,
) -> FlowUnitSet:
    """Partition, aggregate, predict and fuse; returns F_fuse of the last frame at the primary level."""
    raw_units = partition_sequence_levels(sequence, rig, model_config.levels, w_ego, SizePower.from_name(model_config.size_power))
    model = MultiLevelFlowModel(rig, model_config, horizon=len(sequence.frames))
    return model.encode(params, raw_units)[model_config.primary_level]
