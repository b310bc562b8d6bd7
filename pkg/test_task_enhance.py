"""Tests for object and region enhancement and the toy localization task."""

import json
import math

import numpy as np
import pytest

from config import LocalizationConfig, RigConfig
from errors import ConfigurationError, DimensionError, InvalidInputError
from flow_dynamics import pool_unit
from rig_geometry import FlowUnitSet, PanoramicRig, build_layout, uniform_layout
from task_enhance import (
    ObjectQuery,
    RegionFeature,
    covering_units,
    cross_entropy,
    enhance_queries,
    init_enhance_params,
    make_localization_dataset,
    object_enhance,
    region_enhance,
    run_localization,
    toy_localization,
    write_localization_csv,
    write_localization_dataset,
)
from tensor_core import ParamInitializer, Tensor, finite_diff_grad

C = 3


@pytest.fixture
def rig():
    return PanoramicRig.from_config(RigConfig(num_cameras=4, width=4, height=1, channels=C, levels=[2]))


@pytest.fixture
def params():
    init = ParamInitializer(0)
    init_enhance_params(init, C)
    return init.build()


def _fuse(seed=1, n=4):
    return FlowUnitSet(Tensor(np.random.default_rng(seed).normal(size=(2, n, 1, 2, C))))


# ----- covering units -----------------------------------------------------------------------


def test_start_point_is_first_right_unit(rig):
    layout = build_layout(rig, 5.5, 2.5, 1.5, 0)
    assert covering_units([5.5], layout) == [0]


def test_uniform_column_maps_to_unit(rig):
    layout = uniform_layout(rig, 0.0, 0)
    for column in range(rig.perimeter):
        assert covering_units([column + 0.5], layout) == [column // 2]


def test_points_in_one_unit_give_singleton(rig):
    assert covering_units([4.1, 4.5, 5.9], uniform_layout(rig, 0.0, 0)) == [2]


def test_points_across_units_are_sorted_and_unique(rig):
    assert covering_units([9.0, 1.0, 1.5, 15.0], uniform_layout(rig, 0.0, 0)) == [0, 4, 7]


def test_query_needs_points():
    with pytest.raises(InvalidInputError):
        ObjectQuery(Tensor(np.zeros(C)), [])


# ----- object enhancement --------------------------------------------------------------------


def test_zero_unit_and_zero_values_return_embedding(rig, params):
    params = params.replaced({"object.attn.wv": np.zeros((C, C))})
    embedding = np.random.default_rng(2).normal(size=C)
    fuse = FlowUnitSet(Tensor(np.zeros((2, 4, 1, 2, C))))
    out = object_enhance(ObjectQuery(Tensor(embedding), [0.5]), fuse, uniform_layout(rig, 0.0, 0), params)
    np.testing.assert_array_equal(out.data, embedding)


@pytest.mark.parametrize("points", [[0.5], [0.5, 3.5], [0.5, 3.5, 9.0, 15.5]])
def test_output_width_is_channels(rig, params, points):
    query = ObjectQuery(Tensor(np.ones(C)), points)
    assert object_enhance(query, _fuse(), uniform_layout(rig, 0.0, 0), params).shape == (C,)


def test_embedding_width_mismatch(rig, params):
    with pytest.raises(DimensionError):
        object_enhance(ObjectQuery(Tensor(np.ones(C + 1)), [0.5]), _fuse(), uniform_layout(rig, 0.0, 0), params)


def test_object_enhance_ignores_units_outside_covering_set(rig, params):
    data = np.full((2, 4, 1, 2, C), np.nan)
    data[1, 0] = np.random.default_rng(9).normal(size=(1, 2, C))
    fuse = FlowUnitSet(Tensor(data))
    assert np.all(np.isfinite(fuse.ring_order().data[0]))
    out = object_enhance(ObjectQuery(Tensor(np.ones(C)), [0.5, 1.5]), fuse, uniform_layout(rig, 0.0, 0), params)
    assert np.all(np.isfinite(out.data))


def test_object_enhance_gradient(rig, params):
    layout = uniform_layout(rig, 0.0, 0)
    rng = np.random.default_rng(3)
    report = finite_diff_grad(
        lambda e, f: (object_enhance(ObjectQuery(e, [0.5, 5.0]), FlowUnitSet(f), layout, params) ** 2).sum(),
        [rng.normal(size=C), rng.normal(size=(2, 4, 1, 2, C))],
    )
    assert report.max_relative_error < 1e-4


def test_batched_enhancement_matches_single_queries(rig, params):
    layout = uniform_layout(rig, 0.0, 0)
    fuse = _fuse(4)
    rng = np.random.default_rng(4)
    embeddings = rng.normal(size=(3, C))
    points = [[0.5], [2.5, 9.5], [15.0, 0.5, 7.0]]
    covering = [covering_units(p, layout) for p in points]
    width = max(len(c) for c in covering)
    index = np.zeros((3, width), dtype=int)
    mask = np.zeros((3, width), dtype=bool)
    for i, units in enumerate(covering):
        index[i, : len(units)] = units
        mask[i, : len(units)] = True
    tokens = pool_unit(fuse.ring_order())
    batched = enhance_queries(Tensor(embeddings), tokens, index, mask, params).data
    for i in range(3):
        single = object_enhance(ObjectQuery(Tensor(embeddings[i]), points[i]), fuse, layout, params).data
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_covering_unit_order_does_not_matter(params):
    rng = np.random.default_rng(8)
    embeddings = Tensor(rng.normal(size=(1, C)))
    tokens = Tensor(rng.normal(size=(8, C)))
    mask = np.ones((1, 3), dtype=bool)
    a = enhance_queries(embeddings, tokens, np.array([[1, 4, 6]]), mask, params).data
    b = enhance_queries(embeddings, tokens, np.array([[6, 1, 4]]), mask, params).data
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_padded_slots_never_read_tokens(params):
    rng = np.random.default_rng(10)
    tokens = rng.normal(size=(6, C))
    tokens[0] = np.nan
    index = np.array([[3, 4], [5, 0]])
    mask = np.array([[True, True], [True, False]])
    out = enhance_queries(Tensor(rng.normal(size=(2, C))), Tensor(tokens), index, mask, params).data
    assert np.all(np.isfinite(out))


def test_batched_enhancement_needs_a_unit_per_query(params):
    with pytest.raises(InvalidInputError):
        enhance_queries(
            Tensor(np.ones((1, C))), Tensor(np.ones((2, C))), np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=bool), params
        )


# ----- region enhancement --------------------------------------------------------------------


def test_projection_mix_returns_region(params):
    mix = np.vstack([np.eye(C), np.zeros((C, C))])
    region = np.random.default_rng(5).normal(size=(1, 2, C))
    out = region_enhance(RegionFeature(Tensor(region), 3), Tensor(np.ones((1, 2, C))), params.replaced({"region.mix": mix}))
    np.testing.assert_array_equal(out.feature.data, region)
    assert out.unit_index == 3


def test_region_shape_preserved(params):
    rng = np.random.default_rng(6)
    out = region_enhance(RegionFeature(Tensor(rng.normal(size=(2, 4, C))), 0), Tensor(rng.normal(size=(2, 4, C))), params)
    assert out.feature.shape == (2, 4, C)


def test_region_shape_mismatch(params):
    with pytest.raises(DimensionError):
        region_enhance(RegionFeature(Tensor(np.ones((2, 4, C))), 0), Tensor(np.ones((2, 3, C))), params)


def test_region_enhance_gradient(params):
    rng = np.random.default_rng(7)
    report = finite_diff_grad(
        lambda r, u: (region_enhance(RegionFeature(r, 0), u, params).feature ** 2).sum(),
        [rng.normal(size=(1, 2, C)), rng.normal(size=(1, 2, C))],
    )
    assert report.max_relative_error < 1e-4


# ----- toy localization -------------------------------------------------------------------------


def test_cross_entropy_of_uniform_logits():
    value = cross_entropy(Tensor(np.zeros((4, 5))), np.array([0, 1, 2, 3])).item()
    assert value == pytest.approx(math.log(5), abs=1e-12)


def test_too_few_objects():
    with pytest.raises(ConfigurationError):
        make_localization_dataset(LocalizationConfig(num_objects=10), 0)


def test_labels_match_positions():
    dataset = make_localization_dataset(LocalizationConfig(), 0)
    for position, label in zip(dataset.positions, dataset.labels):
        assert dataset.layout.unit_index_of(position) == label
    assert dataset.num_classes == 16


def test_separable_objects_are_learned_by_both():
    report = toy_localization(LocalizationConfig(kind="separable"), 0)
    assert report.baseline_accuracy == 1.0
    assert report.enhanced_accuracy == 1.0


def test_flow_units_help_when_only_they_carry_position():
    reports = run_localization(LocalizationConfig(kind="flow_only"))
    assert len(reports) == 5
    enhanced = np.mean([r.enhanced_accuracy for r in reports])
    baseline = np.mean([r.baseline_accuracy for r in reports])
    assert enhanced > baseline


def test_null_sampling_points_ignore_the_label():
    dataset = make_localization_dataset(LocalizationConfig(kind="null"), 0)
    hits = [label in covering_units(p, dataset.layout) for p, label in zip(dataset.points, dataset.labels)]
    assert np.mean(hits) < 0.3

    flow = make_localization_dataset(LocalizationConfig(kind="flow_only"), 0)
    assert all(label in covering_units(p, flow.layout) for p, label in zip(flow.points, flow.labels))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_null_dataset_stays_near_chance(seed):
    report = toy_localization(LocalizationConfig(kind="null", seeds=[seed]), seed)
    assert report.chance == pytest.approx(1 / 16)
    assert report.baseline_accuracy < 0.3
    assert report.enhanced_accuracy < 0.3


def test_localization_files(tmp_path):
    config = LocalizationConfig(num_objects=50, num_frames=2, epochs=2, seeds=[1])
    dataset = make_localization_dataset(config, 1)
    path = write_localization_dataset(dataset, tmp_path)
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(records) == 50
    assert (tmp_path / records[0]["embedding_file"]).is_file()
    assert records[0]["sampling_points"] == dataset.points[0]
    assert (tmp_path / "units_001.flt").is_file()

    reports = run_localization(config, tmp_path / "dump")
    assert (tmp_path / "dump" / "seed_1" / "objects.jsonl").is_file()
    lines = write_localization_csv(reports, tmp_path / "localization.csv").read_text().splitlines()
    assert lines[0] == "kind,seed,enhanced_accuracy,baseline_accuracy,chance"
    assert len(lines) == 2


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
