import numpy as np
import pytest
from scipy.special import gammaln

from nerp.nerp_configs import FeatureOracleConfig
from nerp.nerp_exceptions import InvalidScene, PlacementExhausted, UnknownObject
from nerp.nerp_scene import (
    PLACEMENT_GRID,
    FeatureOracle,
    Scene,
    Shape,
    apply_placement,
    displacements,
    final_error,
    fits_table,
    footprint_overlap,
    is_success,
    load_scene,
    make_target_by_swap,
    misplaced_ids,
    sample_scene,
    sample_table_position,
    save_scene,
    scene_from_objects,
)


@pytest.mark.parametrize("num_objects", [1, 3, 5, 8])
def test_sample_scene_is_valid(num_objects: int, rng, small_scene_cfg) -> None:
    scene = sample_scene(num_objects, rng=rng, cfg=small_scene_cfg)
    assert len(scene) == num_objects
    assert scene.ids == list(range(num_objects))
    scene.validate(small_scene_cfg.margin)
    for obj in scene.objects:
        assert obj.cloud.shape == (small_scene_cfg.n_pts, 3)
        np.testing.assert_allclose(obj.centroid, obj.position, atol=1e-9)
        assert np.linalg.norm(obj.feature) == pytest.approx(1.0)


def test_sample_scene_is_reproducible(small_scene_cfg) -> None:
    a = sample_scene(4, rng=np.random.default_rng(11), cfg=small_scene_cfg)
    b = sample_scene(4, rng=np.random.default_rng(11), cfg=small_scene_cfg)
    assert a.content_hash() == b.content_hash()


def test_sample_scene_rejects_empty(rng) -> None:
    with pytest.raises(InvalidScene):
        sample_scene(0, rng=rng)


def test_sample_scene_gives_up_on_a_crowded_table(rng, small_scene_cfg) -> None:
    with pytest.raises(PlacementExhausted):
        sample_scene(40, table_range=(0.2, 0.2), rng=rng, cfg=small_scene_cfg)


def test_table_positions_lie_on_the_placement_grid(rng) -> None:
    shape = Shape.box(0.03, 0.04, 0.05)
    for _ in range(50):
        position = sample_table_position(shape, (0.7, 0.8), rng)
        assert np.all(np.mod(position[:2], PLACEMENT_GRID) == 0)
        assert 0.03 <= position[0] <= 0.67
        assert 0.04 <= position[1] <= 0.76


@pytest.mark.parametrize(
    "other, expected",
    [
        ((0.20, 0.10), True),  # centres 0.08 apart, radii sum 0.08
        ((0.30, 0.10), False),
        ((0.2445, 0.10), False),
    ],
)
def test_cylinder_overlap(cylinder_at, other, expected: bool) -> None:
    a = cylinder_at(0, 0.12, 0.10)
    b = cylinder_at(1, *other)
    assert footprint_overlap(a, b, margin=0.005) is expected


def test_box_overlap_is_symmetric(cylinder_at) -> None:
    box = cylinder_at(0, 0.2, 0.2)
    box = type(box)(
        id=2,
        shape=Shape.box(0.05, 0.02, 0.05),
        position=np.array([0.2, 0.2, 0.05]),
        cloud=box.cloud,
        feature=box.feature,
    )
    near = cylinder_at(1, 0.28, 0.2)
    far = cylinder_at(1, 0.4, 0.2)
    assert footprint_overlap(box, near) and footprint_overlap(near, box)
    assert not footprint_overlap(box, far) and not footprint_overlap(far, box)


def test_validate_catches_each_broken_invariant(cylinder_at) -> None:
    ok = [cylinder_at(0, 0.1, 0.1), cylinder_at(1, 0.3, 0.3)]
    scene_from_objects((0.5, 0.5), ok).validate()

    with pytest.raises(InvalidScene, match="Duplicate"):
        scene_from_objects((0.5, 0.5), [ok[0], cylinder_at(0, 0.3, 0.3)]).validate()
    with pytest.raises(InvalidScene, match="leaves the table"):
        scene_from_objects((0.5, 0.5), [cylinder_at(0, 0.49, 0.1)]).validate()
    with pytest.raises(InvalidScene, match="overlap"):
        scene_from_objects((0.5, 0.5), [ok[0], cylinder_at(1, 0.15, 0.1)]).validate()
    with pytest.raises(InvalidScene):
        scene_from_objects((0.5, 0.5), []).validate()


def test_unknown_object_lookup(swap_pair) -> None:
    current, _ = swap_pair
    with pytest.raises(UnknownObject):
        current.get(7)


def test_swap_target_moves_every_object_onto_anothers_spot(rng, small_scene_cfg) -> None:
    scene = sample_scene(5, rng=rng, cfg=small_scene_cfg)
    target = make_target_by_swap(scene, rng)
    target.validate()
    source_spots = {tuple(p[:2]) for p in scene.positions}
    for obj in scene.objects:
        goal = target.get(obj.id)
        assert tuple(goal.xy) != tuple(obj.xy)
        assert tuple(goal.xy) in source_spots
        assert goal.cloud_seed == obj.cloud_seed


def test_swap_needs_two_objects(rng, small_scene_cfg) -> None:
    with pytest.raises(InvalidScene):
        make_target_by_swap(sample_scene(1, rng=rng, cfg=small_scene_cfg), rng)


def test_apply_placement_translates_cloud_and_position(swap_pair) -> None:
    current, _ = swap_pair
    moved = apply_placement(current, 0, [0.25, 0.0, 0.0])
    np.testing.assert_array_equal(moved.get(0).position, [0.375, 0.25, 0.05])
    np.testing.assert_allclose(moved.get(0).centroid, moved.get(0).position, atol=1e-12)
    assert moved.get(1) is current.get(1)
    assert current.get(0).position[0] == 0.125


def test_success_metrics(swap_pair) -> None:
    current, target = swap_pair
    np.testing.assert_allclose(displacements(current, target), [0.25, 0.25])
    assert final_error(current, target) == pytest.approx(0.25)
    assert misplaced_ids(current, target) == [0, 1]
    assert not is_success(current, target)

    done = apply_placement(apply_placement(current, 0, [0.25, 0, 0]), 1, [-0.25, 0, 0])
    assert is_success(done, target)
    assert final_error(done, target) == 0.0


def test_success_tolerance_is_inclusive(swap_pair) -> None:
    current, _ = swap_pair
    near = apply_placement(current, 0, [0.004, 0, 0])
    assert is_success(near, current, tol=0.005)
    assert not is_success(apply_placement(current, 0, [0.006, 0, 0]), current, tol=0.005)


def test_scene_file_round_trip_regenerates_clouds(tmp_path, swap_pair) -> None:
    current, _ = swap_pair
    path = tmp_path / "nested" / "scene.json"
    save_scene(current, str(path))
    loaded = load_scene(str(path))
    assert isinstance(loaded, Scene)
    assert loaded.content_hash() == current.content_hash()
    np.testing.assert_array_equal(loaded.get(1).cloud, current.get(1).cloud)


def test_fits_table_on_the_edge(cylinder_at) -> None:
    assert fits_table(cylinder_at(0, 0.04, 0.04), (0.5, 0.5))
    assert not fits_table(cylinder_at(0, 0.039, 0.2), (0.5, 0.5))


def test_feature_oracle_noise(swap_pair) -> None:
    current, _ = swap_pair
    clean = FeatureOracle(FeatureOracleConfig()).view(current)
    np.testing.assert_array_equal(clean, np.eye(32)[:2])

    oracle = FeatureOracle(FeatureOracleConfig(noise_sigma=0.1, seed=3))
    first, second = oracle.view(current), oracle.view(current)
    assert not np.array_equal(first, second)
    again = FeatureOracle(FeatureOracleConfig(noise_sigma=0.1, seed=3)).view(current)
    np.testing.assert_array_equal(first, again)


def test_feature_oracle_noise_statistics(swap_pair) -> None:
    current, _ = swap_pair
    sigma, dim, trials = 0.05, 32, 1000
    oracle = FeatureOracle(FeatureOracleConfig(dim=dim, noise_sigma=sigma, seed=11))
    clean = np.array([o.feature for o in current.objects])
    noise = np.stack([oracle.view(current) - clean for _ in range(trials)])
    n = noise.size
    assert abs(noise.mean()) <= 3 * sigma / np.sqrt(n)
    assert abs(noise.std() - sigma) <= 3 * sigma / np.sqrt(2 * n)
    # the per-object deviation norm follows a scaled chi distribution with `dim` degrees
    norms = np.linalg.norm(noise, axis=2).reshape(-1)
    chi_mean = sigma * np.sqrt(2) * np.exp(gammaln((dim + 1) / 2) - gammaln(dim / 2))
    chi_std = np.sqrt(dim * sigma**2 - chi_mean**2)
    assert abs(norms.mean() - chi_mean) <= 3 * chi_std / np.sqrt(norms.size)
