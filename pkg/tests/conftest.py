import os
from typing import List

import numpy as np
import pytest
from _pytest.fixtures import FixtureRequest

from nerp.configs import MoveKind
from nerp.nerp_alignment import build_graph, ground_truth_assignment
from nerp.nerp_configs import EncoderConfig, ModelConfig, SAConfig, SALayerConfig, SceneConfig
from nerp.nerp_datagen import TrainingSample
from nerp.nerp_expert import expert_plan
from nerp.nerp_scene import SceneObject, Shape, make_cloud, scene_from_objects


def pytest_addoption(parser):
    parser.addoption(
        "--profile",
        action="store",
        default=os.getenv("NERP_TEST_PROFILE", "smoke"),
        type=str,
        help="smoke (fast, small configs) or desk (acceptance-scale runs)",
    )


@pytest.fixture(scope="session")
def profile(request: FixtureRequest) -> str:
    profile = request.config.getoption("--profile")
    if profile not in ("smoke", "desk"):
        raise ValueError(f"Unknown profile: {profile}")
    return profile


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(int(os.getenv("NERP_TEST_SEED", "0")))


@pytest.fixture(scope="session")
def small_scene_cfg() -> SceneConfig:
    return SceneConfig(n_pts=64)


@pytest.fixture(scope="session")
def tiny_sa_cfg() -> SAConfig:
    return SAConfig(
        layers=[
            SALayerConfig(ratio=0.5, radius=0.4, widths=[4, 8, 8], max_neighbors=8),
            SALayerConfig(ratio=0.5, radius=0.6, widths=[11, 16], max_neighbors=8),
        ],
        global_widths=[19, 32],
        head_widths=[32, 16, 1],
        n_points=32,
    )


@pytest.fixture(scope="session")
def small_model_cfg() -> ModelConfig:
    return ModelConfig(encoder=EncoderConfig(hidden=16))


def pytest_runtest_setup(item):
    # Apply profile skips before any class/session-scoped fixtures are set up.
    profile_type = item.config.getoption("--profile")

    if item.get_closest_marker("skip_profile"):
        if profile_type in item.get_closest_marker("skip_profile").args:
            pytest.skip(f"Skipped on '{profile_type}' profile")

    if item.get_closest_marker("only_with_profile"):
        if profile_type not in item.get_closest_marker("only_with_profile").args:
            pytest.skip(f"Skipped on '{profile_type}' profile")


@pytest.fixture(autouse=True)
def skip_by_profile_type(request: FixtureRequest):
    profile_type = request.config.getoption("--profile")

    if request.node.get_closest_marker("skip_profile"):
        if profile_type in request.node.get_closest_marker("skip_profile").args:
            pytest.skip(f"Skipped on '{profile_type}' profile")

    if request.node.get_closest_marker("only_with_profile"):
        if profile_type not in request.node.get_closest_marker("only_with_profile").args:
            pytest.skip(f"Skipped on '{profile_type}' profile")


def build_cylinder(object_id: int, x: float, y: float, radius: float = 0.04) -> SceneObject:
    shape = Shape.cylinder(radius, 0.10)
    position = np.array([x, y, shape.half_height])
    return SceneObject(
        id=object_id,
        shape=shape,
        position=position,
        cloud=make_cloud(shape, position, 100 + object_id, 64),
        feature=np.eye(32)[object_id],
        cloud_seed=100 + object_id,
    )


@pytest.fixture
def cylinder_at():
    return build_cylinder


@pytest.fixture
def swap_pair():
    """Two cylinders that trade places; each goal is held by the other object."""
    table = (0.5, 0.5)
    current = scene_from_objects(
        table, [build_cylinder(0, 0.125, 0.25), build_cylinder(1, 0.375, 0.25)]
    )
    target = scene_from_objects(
        table, [build_cylinder(0, 0.375, 0.25), build_cylinder(1, 0.125, 0.25)]
    )
    return current, target


@pytest.fixture
def swap_samples(swap_pair) -> List[TrainingSample]:
    """Expert samples for the swap pair, with one perturbed negative per goal move."""
    current, target = swap_pair
    trace = expert_plan(current, target, rng=np.random.default_rng(0))
    samples = []
    for step, move in enumerate(trace.moves):
        before = move.scene_before
        graph = build_graph(before, target, ground_truth_assignment(before, target))
        selected = before.index_of(move.object_id)
        y_goal = int(move.kind == MoveKind.ToGoal)
        variants = [(move.delta, y_goal, False)]
        if y_goal:
            variants.append((move.delta + np.array([0.05, 0.0, 0.0]), 0, True))
        for goal_delta, label, augmented in variants:
            samples.append(
                TrainingSample(
                    graph=graph,
                    y_nodes=np.eye(len(before))[selected],
                    selected=selected,
                    delta=move.delta,
                    y_goal=label,
                    goal_delta=goal_delta,
                    augmented=augmented,
                    sample_id=f"000000-{step:03d}" + ("-neg" if augmented else ""),
                    problem_id=0,
                    kind=move.kind,
                )
            )
    return samples
