import numpy as np
import pytest

from nerp.configs import Method, MoveKind, TraceStatus
from nerp.nerp_collision import OracleCollisionChecker
from nerp.nerp_configs import ExpertConfig, FeatureOracleConfig
from nerp.nerp_exceptions import CorruptRecord
from nerp.nerp_expert import (
    classical_heuristic_plan,
    classical_random_plan,
    expert_plan,
    read_trace,
    replay_trace,
    sample_storage,
    write_trace,
)
from nerp.nerp_scene import (
    apply_placement,
    footprint_overlap,
    is_success,
    make_target_by_swap,
    sample_scene,
    scene_from_objects,
)


def test_expert_swaps_a_pair_in_three_moves(swap_pair) -> None:
    current, target = swap_pair
    trace = expert_plan(current, target, rng=np.random.default_rng(0))
    assert trace.status == TraceStatus.Success
    assert trace.steps == 3
    assert [m.kind for m in trace.moves] == [
        MoveKind.ToStorage,
        MoveKind.ToGoal,
        MoveKind.ToGoal,
    ]
    assert trace.final_error == 0.0
    assert trace.moves[0].object_id == trace.moves[2].object_id


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_expert_solves_sampled_swaps_exactly(seed: int, small_scene_cfg) -> None:
    rng = np.random.default_rng(seed)
    current = sample_scene(5, rng=rng, cfg=small_scene_cfg)
    target = make_target_by_swap(current, rng)
    trace = expert_plan(current, target, rng=rng)
    assert trace.success
    assert trace.steps <= 2 * len(current)
    assert np.all(trace.final_displacements == 0.0)
    final = trace.final_scene(current)
    assert is_success(final, target, tol=0.0)
    final.validate()


def test_every_expert_move_lands_collision_free(rng, small_scene_cfg) -> None:
    current = sample_scene(6, rng=rng, cfg=small_scene_cfg)
    target = make_target_by_swap(current, rng)
    trace = expert_plan(current, target, rng=rng)
    for move in trace.moves:
        moved = move.scene_after.get(move.object_id)
        others = move.scene_after.others(move.object_id)
        assert not any(footprint_overlap(moved, o) for o in others)


def test_expert_stops_when_the_budget_runs_out(swap_pair) -> None:
    current, target = swap_pair
    trace = expert_plan(current, target, budget=1, rng=np.random.default_rng(0))
    assert trace.status == TraceStatus.BudgetExhausted
    assert trace.steps == 1
    assert trace.final_error > 0.0


def test_expert_on_a_solved_scene_does_nothing(swap_pair) -> None:
    current, _ = swap_pair
    trace = expert_plan(current, current, rng=np.random.default_rng(0))
    assert trace.success and trace.steps == 0
    assert trace.final_scene(current) is current


def test_storage_fails_on_a_full_table(cylinder_at) -> None:
    # a 0.1 x 0.1 table: the only spot for a 0.04 cylinder is taken by the other object
    scene = scene_from_objects((0.1, 0.1), [cylinder_at(0, 0.05, 0.05)])
    blocker = cylinder_at(1, 0.05, 0.05)
    cfg = ExpertConfig(storage_attempts=10, storage_batch=4)
    spot = sample_storage(
        scene, 0, OracleCollisionChecker(), np.random.default_rng(0), cfg, avoid=[blocker]
    )
    assert spot is None


def test_storage_spot_is_free(swap_pair) -> None:
    current, _ = swap_pair
    spot = sample_storage(
        current, 0, OracleCollisionChecker(), np.random.default_rng(5), ExpertConfig()
    )
    parked = current.get(0).placed_at(spot)
    assert not footprint_overlap(parked, current.get(1))


def test_heuristic_matches_the_expert_without_noise(rng, small_scene_cfg) -> None:
    current = sample_scene(5, rng=rng, cfg=small_scene_cfg)
    target = make_target_by_swap(current, rng)
    expert = expert_plan(current, target, rng=np.random.default_rng(4))
    heuristic = classical_heuristic_plan(
        current, target, OracleCollisionChecker(), rng=np.random.default_rng(4)
    )
    assert heuristic.method == Method.ClassicalHeuristic
    assert [m.object_id for m in heuristic.moves] == [m.object_id for m in expert.moves]
    assert heuristic.status == expert.status


class AlwaysCollides:
    def pair_scores(self, moved, others) -> np.ndarray:
        return np.ones((len(moved), len(others)))


def test_goal_moves_wait_for_a_free_goal(swap_pair) -> None:
    current, target = swap_pair
    heuristic = classical_heuristic_plan(
        current, target, AlwaysCollides(), rng=np.random.default_rng(0)
    )
    shooting = classical_random_plan(
        current, target, AlwaysCollides(), n_rollouts=2, rng=np.random.default_rng(0)
    )
    for trace in (heuristic, shooting):
        assert trace.moves == []
        assert trace.status == TraceStatus.BudgetExhausted


def test_heuristic_with_noisy_features_still_terminates(rng, small_scene_cfg) -> None:
    current = sample_scene(4, rng=rng, cfg=small_scene_cfg)
    target = make_target_by_swap(current, rng)
    trace = classical_heuristic_plan(
        current,
        target,
        OracleCollisionChecker(),
        rng=rng,
        features=FeatureOracleConfig(noise_sigma=0.5, seed=2),
    )
    assert trace.steps <= 2 * len(current)
    assert trace.status in (
        TraceStatus.Success,
        TraceStatus.BudgetExhausted,
        TraceStatus.PlannerConverged,
    )


def test_random_planner_respects_its_horizon(swap_pair) -> None:
    current, target = swap_pair
    trace = classical_random_plan(
        current, target, OracleCollisionChecker(), n_rollouts=4, horizon=3,
        rng=np.random.default_rng(0),
    )
    assert trace.method == Method.ClassicalRandom
    assert trace.steps <= 3
    assert trace.final_displacements.shape == (2,)


def test_random_planner_can_solve_a_single_move(cylinder_at) -> None:
    table = (0.5, 0.5)
    current = scene_from_objects(table, [cylinder_at(0, 0.125, 0.125)])
    target = scene_from_objects(table, [cylinder_at(0, 0.375, 0.375)])
    trace = classical_random_plan(
        current, target, OracleCollisionChecker(), n_rollouts=2, rng=np.random.default_rng(0)
    )
    assert trace.success and trace.steps == 1


def test_trace_files_replay(tmp_path, swap_pair) -> None:
    current, target = swap_pair
    trace = expert_plan(current, target, rng=np.random.default_rng(0))
    path = str(tmp_path / "traces" / "expert.jsonl")
    write_trace(path, trace)
    loaded = read_trace(path)
    assert loaded.status == TraceStatus.Success
    assert [m.kind for m in loaded.moves] == [m.kind for m in trace.moves]
    assert is_success(replay_trace(current, loaded), target, tol=0.0)


def test_replay_detects_a_tampered_trace(swap_pair) -> None:
    current, target = swap_pair
    trace = expert_plan(current, target, rng=np.random.default_rng(0))
    with pytest.raises(CorruptRecord):
        replay_trace(apply_placement(current, 0, [0.001, 0, 0]), trace)
