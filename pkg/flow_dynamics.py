"""
Spatial and temporal scene-flow prediction with latent-state KL losses.

Spatial prediction walks each side of a frame from the partition start
outward: a GRU updates the unit's flow query from the pooled predecessor unit,
and a cross-attention from the predecessor onto the updated query predicts the
unit. Temporal prediction does the same per unit across frames. Both are
trained by matching diagonal-Gaussian latent states of predicted and observed
units.

All functions accept extra leading batch axes, so a whole sequence of frames
runs as one batched call during training.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import FlowModelConfig
from errors import ConfigurationError, DimensionError
from rig_geometry import (
    FlowUnitSet,
    PanoramicRig,
    aggregate_ring,
    init_aggregation_params,
    ring_order_index,
    side_order_index,
)
from tensor_core import ParamInitializer, ParamSet, Tensor, as_tensor, attention_block, concat, gru_cell, kl_from_log_sigma, mlp, stack

logger = logging.getLogger(__name__)

UnitsLike = Union[FlowUnitSet, Tensor]


def _data(units: UnitsLike) -> Tensor:
    return units.data if isinstance(units, FlowUnitSet) else as_tensor(units)


def pool_unit(unit: Tensor) -> Tensor:
    """Mean over the H x P positions of (..., H, P, C) units."""
    return unit.mean(axis=(-3, -2))


@dataclass
class LatentGaussian:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> Tensor:
        return self.log_sigma.exp()


def flow_step(
    q: Tensor,
    f_prev: Tensor,
    params: ParamSet,
    prefix: str,
    residual: bool = False,
    decoupled: bool = True,
) -> Tuple[Tensor, Tensor]:
    """
    One flow prediction step: (q_hat, f_hat) from a query and its predecessor unit.

    q is (..., C) and f_prev (..., H, P, C). The GRU takes the pooled predecessor
    as input and the query as state. Decoupled steps reconstruct the unit by
    attending from the predecessor's H*P tokens onto the single updated query;
    coupled steps use the transition state directly as every position of the unit.
    """
    if f_prev.ndim < 3 or q.shape[-1] != f_prev.shape[-1]:
        raise DimensionError(f"query {q.shape} does not fit predecessor units {f_prev.shape}")
    h, p, c = f_prev.shape[-3:]
    q_hat = gru_cell(pool_unit(f_prev), q, params, f"{prefix}.gru")
    batch = q_hat.shape[:-1]
    if not decoupled:
        f_hat = q_hat.reshape(batch + (1, 1, c)).broadcast_to(batch + (h, p, c))
        return q_hat, f_hat
    tokens = f_prev.reshape(f_prev.shape[:-3] + (h * p, c))
    kv = q_hat.reshape(batch + (1, c))
    f_hat = attention_block(tokens, kv, params, f"{prefix}.attn", residual=residual)
    return q_hat, f_hat.reshape(f_hat.shape[:-2] + (h, p, c))


def spatial_flow_step(
    q_j: Tensor, f_prev: Tensor, params: ParamSet, residual: bool = False, decoupled: bool = True
) -> Tuple[Tensor, Tensor]:
    """Step for unit j on both sides: q_j is (2, C), f_prev (2, H, P, C)."""
    return flow_step(q_j, f_prev, params, "spatial", residual, decoupled)


def spatial_predecessors(units: Tensor, substitute: Tensor) -> Tensor:
    """
    Observed predecessor of every unit: unit j-1 on the same side, and for the
    first unit the substitute (the previous frame's first units).

    units is (..., 2, n, H, P, C) and substitute (..., 2, H, P, C).
    """
    if substitute.shape != units.shape[:-4] + units.shape[-3:]:
        raise DimensionError(f"substitute {substitute.shape} does not fit units {units.shape}")
    first = substitute.reshape(substitute.shape[:-3] + (1,) + substitute.shape[-3:])
    return concat([first, units[..., :-1, :, :, :]], axis=-4)


def spatial_flow_predict(
    units: UnitsLike,
    queries: Tensor,
    first_unit_prev_frame: Optional[Tensor],
    params: ParamSet,
    residual: bool = False,
    decoupled: bool = True,
) -> FlowUnitSet:
    """
    Predict every unit of a frame from its observed predecessor (teacher forcing).

    queries is (2, n, C); a missing previous frame uses a zero substitute.
    """
    data = _data(units)
    if queries.shape[:-1] != data.shape[-5:-3]:
        raise DimensionError(f"spatial queries {queries.shape} do not match {data.shape[-5:-3]} units")
    if first_unit_prev_frame is None:
        first_unit_prev_frame = Tensor(np.zeros(data.shape[:-4] + data.shape[-3:]))
    predecessors = spatial_predecessors(data, first_unit_prev_frame)
    _, f_hat = flow_step(queries, predecessors, params, "spatial", residual, decoupled)
    return FlowUnitSet(f_hat) if f_hat.ndim == 5 else f_hat


def sequence_substitutes(sequence: Tensor) -> Tensor:
    """(T, 2, H, P, C) substitutes for a (T, 2, n, H, P, C) sequence: zeros, then each previous frame's first units."""
    zeros = Tensor(np.zeros((1,) + sequence.shape[1:2] + sequence.shape[3:]))
    if sequence.shape[0] == 1:
        return zeros
    return concat([zeros, sequence[:-1, :, 0]], axis=0)


@dataclass
class TemporalPrediction:
    """Per-step predictions for t = 2..T, stacked as (T-1, 2, n, H, P, C)."""

    steps: Tensor

    @property
    def last(self) -> FlowUnitSet:
        """F_tem at the final frame, the output used downstream."""
        return FlowUnitSet(self.steps[-1])

    def frame(self, t: int) -> FlowUnitSet:
        """Prediction of frame t (1-based, t >= 2)."""
        return FlowUnitSet(self.steps[t - 2])


def temporal_flow_predict(
    sequence: Union[Sequence[FlowUnitSet], Tensor],
    queries: Tensor,
    params: ParamSet,
    residual: bool = False,
    decoupled: bool = True,
) -> TemporalPrediction:
    """
    Predict frame t's units from frame t-1's, for t = 2..T.

    queries holds one (2, n, C) block per frame, shape (T, 2, n, C); the block
    of frame 1 has no predecessor and stays unused.
    """
    stacked = stack([u.data for u in sequence]) if not isinstance(sequence, Tensor) else sequence
    horizon = stacked.shape[0]
    if horizon < 2:
        raise ConfigurationError(f"temporal prediction needs at least 2 frames, got {horizon}")
    if queries.shape[0] < horizon or queries.shape[1:-1] != stacked.shape[1:3]:
        raise DimensionError(f"temporal queries {queries.shape} do not cover {horizon} frames of {stacked.shape[1:3]} units")
    _, f_hat = flow_step(queries[1:horizon], stacked[:-1], params, "temporal", residual, decoupled)
    return TemporalPrediction(f_hat)


# ----- latent states and losses ----------------------------------------------------


def latent_state(units: Tensor, params: ParamSet, head: str) -> LatentGaussian:
    """Map (..., H, P, C) units through state head `head` to (mu, log sigma) of width C'."""
    out = mlp(units, params, f"state.{head}")
    width = out.shape[-1] // 2
    return LatentGaussian(out[..., :width], out[..., width:])


def _state_loss(pred: Tensor, gt: Tensor, params: ParamSet, share_heads: bool) -> Tensor:
    if pred.shape != gt.shape:
        raise DimensionError(f"predicted units {pred.shape} and observed units {gt.shape} differ")
    predicted = latent_state(pred, params, "pred")
    # observed branch is a constant target: neither its units nor its head get gradients
    head = "pred" if share_heads else "gt"
    observed = latent_state(gt.detach(), params.detached(f"state.{head}."), head)
    return kl_from_log_sigma(predicted.mu, predicted.log_sigma, observed.mu, observed.log_sigma)


def spatial_loss(pred: UnitsLike, gt: UnitsLike, params: ParamSet, share_heads: bool = False) -> Tensor:
    """KL(predicted state || observed state), mean over units (and frames when batched)."""
    return _state_loss(_data(pred), _data(gt), params, share_heads)


def temporal_loss(
    preds: Union[TemporalPrediction, Sequence[FlowUnitSet], Tensor],
    gts: Union[Sequence[FlowUnitSet], Tensor],
    params: ParamSet,
    share_heads: bool = False,
) -> Tensor:
    """Same contract as spatial_loss, averaged over t = 2..T."""
    if isinstance(preds, TemporalPrediction):
        preds = preds.steps
    if not isinstance(preds, Tensor):
        preds = stack([u.data for u in preds])
    if not isinstance(gts, Tensor):
        gts = stack([u.data for u in gts])
    return _state_loss(preds, gts, params, share_heads)


def fuse_flow(f_spat: UnitsLike, f_tem: UnitsLike, params: ParamSet, residual: bool = False) -> FlowUnitSet:
    """Width-concatenate spatial and temporal units, self-attend over 2P tokens, reduce back to P."""
    spat, tem = _data(f_spat), _data(f_tem)
    if spat.shape != tem.shape:
        raise DimensionError(f"spatial units {spat.shape} and temporal units {tem.shape} differ")
    joined = concat([spat, tem], axis=-2)
    mixed = attention_block(joined, joined, params, "fuse.attn", residual=residual)
    fused = mlp(mixed.swapaxes(-1, -2), params, "fuse.mlp").swapaxes(-1, -2)
    return FlowUnitSet(fused) if fused.ndim == 5 else fused


# ----- model ------------------------------------------------------------------------


@dataclass
class FlowLosses:
    spatial: Tensor
    temporal: Tensor
    total: Tensor

    def values(self) -> Tuple[float, float, float]:
        return self.spatial.item(), self.temporal.item(), self.total.item()


class SceneFlowModel:
    """
    Parameter layout and forward passes of the flow modules at one partition level.

    Inputs are raw partitioned frames of shape (T, 2, n, H, P, C); local
    aggregation turns them into the observed units every prediction and loss
    works on.
    """

    def __init__(self, rig: PanoramicRig, config: FlowModelConfig, horizon: int, level: Optional[int] = None):
        if horizon < 2:
            raise ConfigurationError(f"horizon must be at least 2, got {horizon}")
        self.rig = rig
        self.config = config
        self.horizon = horizon
        self.level = config.primary_level if level is None else level
        self.base_size = rig.base_size(self.level)
        self.units_per_side = rig.units_per_side(self.level)
        self.channels = rig.channels
        self.latent_channels = config.latent_width(rig.channels)

    def init_params(self, seed: int) -> ParamSet:
        c, p, n = self.channels, self.base_size, self.units_per_side
        init = ParamInitializer(seed)
        init_aggregation_params(init, p, c, self.config.aggregation_range)
        init.uniform("spatial.queries", (2, n, c), c)
        init.gru("spatial.gru", c)
        init.attention("spatial.attn", c)
        init.uniform("temporal.queries", (self.horizon, 2, n, c), c)
        init.gru("temporal.gru", c)
        init.attention("temporal.attn", c)
        init.mlp("state.pred", [c, c, 2 * self.latent_channels])
        if not self.config.share_state_heads:
            init.mlp("state.gt", [c, c, 2 * self.latent_channels])
        init.attention("fuse.attn", c)
        init.mlp("fuse.mlp", [2 * p, p])
        params = init.build()
        logger.info(f"Initialized flow model with {len(params)} tensors ({params.num_values} values), seed {seed}")
        return params

    def check_units(self, raw_units: Tensor) -> None:
        expected = (2, self.units_per_side, self.rig.height, self.base_size, self.channels)
        if raw_units.shape[-5:] != expected:
            raise DimensionError(f"flow units {raw_units.shape} do not match model units {expected}")

    def observe(self, params: ParamSet, raw_units: Tensor) -> Tensor:
        """Local aggregation of (..., 2, n, H, P, C) partitioned frames."""
        self.check_units(raw_units)
        n = self.units_per_side
        lead = raw_units.shape[:-5]
        flat = raw_units.reshape(lead + (2 * n,) + raw_units.shape[-3:])
        ring = flat[..., ring_order_index(n), :, :, :]
        reduced = aggregate_ring(ring, self.config.aggregation_range, params, residual=self.config.attention_residual)
        return reduced[..., side_order_index(n), :, :, :]

    def spatial(self, params: ParamSet, units: Tensor) -> Tensor:
        """F_spat for every frame of a (T, 2, n, H, P, C) sequence."""
        prediction = spatial_flow_predict(
            units,
            params["spatial.queries"],
            sequence_substitutes(units),
            params,
            residual=self.config.attention_residual,
            decoupled=self.config.decoupled,
        )
        return _data(prediction)

    def temporal(self, params: ParamSet, units: Tensor) -> TemporalPrediction:
        return temporal_flow_predict(
            units,
            params["temporal.queries"],
            params,
            residual=self.config.attention_residual,
            decoupled=self.config.decoupled,
        )

    def losses(self, params: ParamSet, raw_units: Tensor, lambda_spat: float = 1.0, lambda_tem: float = 1.0) -> FlowLosses:
        if raw_units.shape[0] > self.horizon:
            raise DimensionError(f"sequence of {raw_units.shape[0]} frames exceeds the model horizon {self.horizon}")
        units = self.observe(params, raw_units)
        share = self.config.share_state_heads
        l_spat = spatial_loss(self.spatial(params, units), units, params, share)
        l_tem = temporal_loss(self.temporal(params, units), units[1:], params, share)
        return FlowLosses(l_spat, l_tem, l_spat * lambda_spat + l_tem * lambda_tem)

    def encode(self, params: ParamSet, raw_units: Tensor) -> FlowUnitSet:
        """F_fuse of the final frame, for downstream enhancement."""
        units = self.observe(params, raw_units)
        f_spat = self.spatial(params, units)[-1]
        f_tem = self.temporal(params, units).last
        return fuse_flow(f_spat, f_tem, params, residual=self.config.attention_residual)


class MultiLevelFlowModel:
    """
    One SceneFlowModel per configured partition level, trained jointly.

    Parameters of level l live under the "level{l}." prefix; the losses of all
    levels add up. Raw units are passed as a mapping from level to the
    (T, 2, n, H, P, C) partition at that level.
    """

    def __init__(self, rig: PanoramicRig, config: FlowModelConfig, horizon: int):
        self.config = config
        self.horizon = horizon
        self.levels = list(config.levels)
        self.models: Dict[int, SceneFlowModel] = {level: SceneFlowModel(rig, config, horizon, level) for level in self.levels}

    @staticmethod
    def prefix(level: int) -> str:
        return f"level{level}."

    def init_params(self, seed: int) -> ParamSet:
        tensors = {}
        for level, model in self.models.items():
            tensors.update({self.prefix(level) + name: value for name, value in model.init_params(seed + level).items()})
        return ParamSet(tensors)

    def level_params(self, params: ParamSet, level: int) -> ParamSet:
        """View of one level's parameters with the prefix stripped; tensors are shared."""
        prefix = self.prefix(level)
        return ParamSet({name[len(prefix):]: value for name, value in params.items() if name.startswith(prefix)})

    def _units(self, raw_units: Mapping[int, Tensor], level: int) -> Tensor:
        if level not in raw_units:
            raise DimensionError(f"no partitioned units for level {level}; got levels {sorted(raw_units)}")
        return as_tensor(raw_units[level])

    def losses(
        self, params: ParamSet, raw_units: Mapping[int, Tensor], lambda_spat: float = 1.0, lambda_tem: float = 1.0
    ) -> FlowLosses:
        parts = [
            model.losses(self.level_params(params, level), self._units(raw_units, level), lambda_spat, lambda_tem)
            for level, model in self.models.items()
        ]
        spatial, temporal, total = parts[0].spatial, parts[0].temporal, parts[0].total
        for part in parts[1:]:
            spatial, temporal, total = spatial + part.spatial, temporal + part.temporal, total + part.total
        return FlowLosses(spatial, temporal, total)

    def encode(self, params: ParamSet, raw_units: Mapping[int, Tensor]) -> Dict[int, FlowUnitSet]:
        return {
            level: model.encode(self.level_params(params, level), self._units(raw_units, level))
            for level, model in self.models.items()
        }
