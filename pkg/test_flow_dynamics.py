"""Tests for spatial and temporal flow prediction, the state losses and fusion."""

import numpy as np
import pytest

from config import FlowModelConfig, RigConfig, TrainingConfig
from errors import ConfigurationError, DimensionError
from flow_dynamics import (
    SceneFlowModel,
    fuse_flow,
    pool_unit,
    spatial_flow_predict,
    spatial_flow_step,
    spatial_loss,
    temporal_flow_predict,
    temporal_loss,
)
from rig_geometry import FlowUnitSet, PanoramicRig
from tensor_core import ParamInitializer, ParamSet, Tensor, finite_diff_grad
from training import FlowTrainer

C = 2


def _params(n=3, horizon=3, p=2, seed=0, share=False):
    init = ParamInitializer(seed)
    init.uniform("spatial.queries", (2, n, C), C)
    init.gru("spatial.gru", C)
    init.attention("spatial.attn", C)
    init.uniform("temporal.queries", (horizon, 2, n, C), C)
    init.gru("temporal.gru", C)
    init.attention("temporal.attn", C)
    init.mlp("state.pred", [C, C, 2])
    if not share:
        init.mlp("state.gt", [C, C, 2])
    init.attention("fuse.attn", C)
    init.mlp("fuse.mlp", [2 * p, p])
    return init.build()


def _units(shape, seed=1):
    return np.random.default_rng(seed).normal(size=shape)


# ----- pooling ----------------------------------------------------------------------------


def test_pool_constant_unit():
    np.testing.assert_allclose(pool_unit(Tensor(np.full((2, 3, 4), 1.5))).data, np.full(4, 1.5))


def test_pool_is_linear():
    a, b = _units((2, 3, 4), 2), _units((2, 3, 4), 3)
    np.testing.assert_allclose(
        pool_unit(Tensor(a + b)).data, pool_unit(Tensor(a)).data + pool_unit(Tensor(b)).data, atol=1e-12
    )


def test_pool_matches_double_loop():
    unit = _units((2, 3, 4), 4)
    expected = np.zeros(4)
    for h in range(2):
        for p in range(3):
            expected += unit[h, p]
    np.testing.assert_allclose(pool_unit(Tensor(unit)).data, expected / 6, atol=1e-12)


# ----- spatial step -------------------------------------------------------------------------


def test_single_key_gives_same_output_for_equal_pooled_predecessors():
    params = _params()
    q = Tensor(_units((2, C), 5))
    f_prev = _units((2, 1, 3, C), 6)
    shuffled = f_prev[:, :, ::-1, :]
    _, out = spatial_flow_step(q, Tensor(f_prev), params)
    _, out_shuffled = spatial_flow_step(q, Tensor(shuffled), params)
    data = out.data
    np.testing.assert_allclose(data, np.broadcast_to(data[:, :1, :1, :], data.shape), atol=1e-12)
    np.testing.assert_allclose(out_shuffled.data, data, atol=1e-12)


def test_spatial_step_gradient_wrt_query():
    params = _params()
    f_prev = Tensor(_units((2, 2, 2, C), 7))
    report = finite_diff_grad(lambda q: (spatial_flow_step(q, f_prev, params)[1] ** 2).sum(), [_units((2, C), 8)])
    assert report.max_relative_error < 1e-4


@pytest.mark.parametrize("p", [1, 2, 4])
def test_spatial_step_keeps_unit_shape(p):
    _, out = spatial_flow_step(Tensor(_units((2, C))), Tensor(_units((2, 3, p, C))), _params())
    assert out.shape == (2, 3, p, C)


def test_coupled_step_broadcasts_transition_state():
    q_hat, f_hat = spatial_flow_step(Tensor(_units((2, C))), Tensor(_units((2, 2, 3, C))), _params(), decoupled=False)
    np.testing.assert_array_equal(f_hat.data, np.broadcast_to(q_hat.data[:, None, None, :], (2, 2, 3, C)))


def test_spatial_step_width_mismatch():
    with pytest.raises(DimensionError):
        spatial_flow_step(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1, 1, C))), _params())


# ----- spatial prediction ----------------------------------------------------------------------


def test_single_unit_side_depends_only_on_substitute():
    params = _params(n=1)
    queries = params["spatial.queries"]
    substitute = Tensor(_units((2, 1, 2, C), 9))
    a = spatial_flow_predict(FlowUnitSet(Tensor(_units((2, 1, 1, 2, C), 10))), queries, substitute, params)
    b = spatial_flow_predict(FlowUnitSet(Tensor(_units((2, 1, 1, 2, C), 11))), queries, substitute, params)
    np.testing.assert_array_equal(a.data.data, b.data.data)


def test_spatial_prediction_shape_and_determinism():
    params = _params()
    units = FlowUnitSet(Tensor(_units((2, 3, 1, 2, C), 12)))
    first = spatial_flow_predict(units, params["spatial.queries"], None, params)
    second = spatial_flow_predict(units, params["spatial.queries"], None, params)
    assert first.shape == units.shape
    np.testing.assert_array_equal(first.data.data, second.data.data)


def test_spatial_queries_must_match_units():
    params = _params(n=2)
    with pytest.raises(DimensionError):
        spatial_flow_predict(FlowUnitSet(Tensor(_units((2, 3, 1, 2, C)))), params["spatial.queries"], None, params)


# ----- losses ---------------------------------------------------------------------------------


def test_spatial_loss_zero_for_identical_units_and_shared_heads():
    params = _params(share=True)
    units = FlowUnitSet(Tensor(_units((2, 3, 1, 2, C))))
    assert spatial_loss(units, units, params, share_heads=True).item() == 0.0


def test_spatial_loss_nonnegative():
    params = _params()
    rng = np.random.default_rng(13)
    for _ in range(100):
        pred, gt = rng.normal(size=(2, 2, 3, 1, 2, C))
        assert spatial_loss(Tensor(pred), Tensor(gt), params).item() >= 0.0


def test_spatial_loss_blocks_observed_gradient():
    params = _params()
    pred = Tensor(_units((2, 3, 1, 2, C), 14), requires_grad=True)
    gt = Tensor(_units((2, 3, 1, 2, C), 15), requires_grad=True)
    spatial_loss(pred, gt, params).backward()
    assert gt.grad is None
    assert pred.grad is not None and np.any(pred.grad != 0)


def test_observed_head_is_frozen():
    leaves = _params().as_leaves()
    spatial_loss(Tensor(_units((2, 3, 1, 2, C), 16)), Tensor(_units((2, 3, 1, 2, C), 17)), leaves).backward()
    grads = leaves.gradients()
    for name in ("state.gt.0.weight", "state.gt.0.bias", "state.gt.1.weight"):
        assert not np.any(grads[name])
    assert np.any(grads["state.pred.0.weight"] != 0)


def test_temporal_loss_zero_for_identical_units():
    params = _params(share=True)
    seq = Tensor(_units((2, 2, 3, 1, 2, C)))
    assert temporal_loss(seq, seq, params, share_heads=True).item() == 0.0


def test_temporal_loss_grows_with_mean_gap():
    weight = np.zeros((C, 2))
    weight[:, 0] = 1.0
    params = ParamSet({"state.pred.0.weight": weight, "state.pred.0.bias": np.zeros(2)})
    gts = _units((2, 2, 3, 1, 2, C), 18)
    gap = _units((2, 2, 3, 1, 2, C), 19)
    near = temporal_loss(Tensor(gts + gap), Tensor(gts), params, share_heads=True).item()
    far = temporal_loss(Tensor(gts + 2 * gap), Tensor(gts), params, share_heads=True).item()
    assert far > near > 0.0


def test_temporal_loss_nonnegative():
    params = _params()
    rng = np.random.default_rng(20)
    for _ in range(100):
        preds, gts = rng.normal(size=(2, 2, 2, 3, 1, 2, C))
        assert temporal_loss(Tensor(preds), Tensor(gts), params).item() >= 0.0


# ----- temporal prediction ----------------------------------------------------------------------


def test_two_frames_give_one_step():
    params = _params(horizon=2)
    frames = [FlowUnitSet(Tensor(_units((2, 3, 1, 2, C), s))) for s in (21, 22)]
    prediction = temporal_flow_predict(frames, params["temporal.queries"], params)
    assert prediction.steps.shape == (1, 2, 3, 1, 2, C)
    assert prediction.last.shape == (2, 3, 1, 2, C)


def test_temporal_needs_two_frames():
    params = _params()
    with pytest.raises(ConfigurationError):
        temporal_flow_predict(Tensor(_units((1, 2, 3, 1, 2, C))), params["temporal.queries"], params)


def test_temporal_queries_must_cover_horizon():
    params = _params(horizon=2)
    with pytest.raises(DimensionError):
        temporal_flow_predict(Tensor(_units((3, 2, 3, 1, 2, C))), params["temporal.queries"], params)


def test_temporal_gradient_through_two_steps():
    params = _params()
    targets = Tensor(_units((2, 2, 3, 1, 2, C), 40))

    def loss(seq):
        prediction = temporal_flow_predict(seq, params["temporal.queries"], params)
        return temporal_loss(prediction, targets, params)

    report = finite_diff_grad(loss, [_units((3, 2, 3, 1, 2, C), 23)])
    assert report.max_relative_error < 1e-4


# ----- fusion -------------------------------------------------------------------------------------


def test_fuse_keeps_unit_shape():
    params = _params()
    spat = FlowUnitSet(Tensor(_units((2, 3, 1, 2, C), 24)))
    tem = FlowUnitSet(Tensor(_units((2, 3, 1, 2, C), 25)))
    assert fuse_flow(spat, tem, params).shape == spat.shape


def test_fuse_is_per_unit():
    params = _params()
    spat, tem = _units((2, 3, 1, 2, C), 26), _units((2, 3, 1, 2, C), 27)
    order = np.array([2, 0, 1])
    fused = fuse_flow(Tensor(spat), Tensor(tem), params).data.data
    permuted = fuse_flow(Tensor(spat[:, order]), Tensor(tem[:, order]), params).data.data
    np.testing.assert_allclose(permuted, fused[:, order], atol=1e-14)


def test_fuse_gradient():
    params = _params()
    report = finite_diff_grad(
        lambda a, b: (fuse_flow(a, b, params).data ** 2).sum(),
        [_units((2, 2, 1, 2, C), 28), _units((2, 2, 1, 2, C), 29)],
    )
    assert report.max_relative_error < 1e-4


def test_fuse_shape_mismatch():
    with pytest.raises(DimensionError):
        fuse_flow(Tensor(np.zeros((2, 3, 1, 2, C))), Tensor(np.zeros((2, 2, 1, 2, C))), _params())


# ----- model ---------------------------------------------------------------------------------------


@pytest.fixture
def small_rig():
    return PanoramicRig.from_config(RigConfig(num_cameras=4, width=4, height=1, channels=C, levels=[2]))


def test_model_parameter_layout(small_rig):
    params = SceneFlowModel(small_rig, FlowModelConfig(), horizon=3).init_params(0)
    assert params["spatial.queries"].shape == (2, 4, C)
    assert params["temporal.queries"].shape == (3, 2, 4, C)
    assert params["aggregate.mlp.0.weight"].shape == (3 * 2, 2)
    assert "state.gt.0.weight" in params

    shared = SceneFlowModel(small_rig, FlowModelConfig(share_state_heads=True), horizon=3).init_params(0)
    assert "state.gt.0.weight" not in shared


def test_model_rejects_foreign_units(small_rig):
    model = SceneFlowModel(small_rig, FlowModelConfig(), horizon=3)
    with pytest.raises(DimensionError):
        model.losses(model.init_params(0), Tensor(np.zeros((3, 2, 3, 1, 2, C))))


def test_model_encode_shape(small_rig):
    model = SceneFlowModel(small_rig, FlowModelConfig(), horizon=3)
    fused = model.encode(model.init_params(0), Tensor(_units((3, 2, 4, 1, 2, C), 30)))
    assert fused.shape == (2, 4, 1, 2, C)


def test_model_horizon_must_allow_a_step(small_rig):
    with pytest.raises(ConfigurationError):
        SceneFlowModel(small_rig, FlowModelConfig(), horizon=1)


def test_repeated_backward_is_bitwise_identical(small_rig):
    model = SceneFlowModel(small_rig, FlowModelConfig(), horizon=3)
    params = model.init_params(4)
    units = Tensor(_units((3, 2, 4, 1, 2, C), 32))
    runs = []
    for _ in range(2):
        leaves = params.as_leaves()
        model.losses(leaves, units).total.backward()
        runs.append(leaves.gradients())
    for name in params:
        assert runs[0][name].tobytes() == runs[1][name].tobytes()


def test_static_scene_temporal_loss_drops(small_rig):
    frame = _units((2, 4, 1, 2, C), 31)
    units = np.stack([frame, frame, frame])
    model = SceneFlowModel(small_rig, FlowModelConfig(), horizon=3)
    result = FlowTrainer(model, TrainingConfig(steps=500, lr=0.01, log_every=250)).train(model.init_params(3), units)
    final = model.losses(result.params, Tensor(units)).temporal.item()
    assert final < 0.5 * result.history[0][1]


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
