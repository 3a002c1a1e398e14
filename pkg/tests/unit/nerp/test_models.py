from dataclasses import replace

import numpy as np
import pytest

from nerp.configs import DropoutMode, MoveKind
from nerp.nerp_alignment import Assignment, RearrGraph, build_graph
from nerp.nerp_configs import EncoderConfig, LossWeights
from nerp.nerp_datagen import TrainingSample
from nerp.nerp_exceptions import MissingCheckpoint, MissingLabel, UntrainedBundle
from nerp.nerp_models import (
    GraphEncoder,
    ModelBundle,
    SelectionScores,
    encode,
    goal_score,
    goal_scores,
    joint_loss,
    load_bundle,
    propose_deltas,
    sample_node,
    select,
    subset_hierarchy,
)
from nerp.nerp_scene import sample_scene
from nerp.neural import Tensor

from test_neural import numeric_gradient


@pytest.fixture
def bundle(small_model_cfg) -> ModelBundle:
    return ModelBundle(small_model_cfg, seed=3)


@pytest.fixture
def graph(rng, small_scene_cfg):
    scene = sample_scene(5, rng=rng, cfg=small_scene_cfg)
    target = sample_scene(5, rng=rng, cfg=small_scene_cfg)
    return build_graph(scene, target, Assignment(tuple(range(5)), 0.0))


def test_subset_hierarchy_on_a_path() -> None:
    levels = subset_hierarchy(3, ((0, 1), (1, 2)), 3)
    assert levels[1].subsets == ((0, 1), (1, 2))
    assert levels[2].subsets == ((0, 1, 2),)
    # swapping 0 for 2 in {0, 1} would need the edge (0, 2)
    assert levels[1].neighbors == ((), ())
    assert levels[2].children == ((0, 1),)
    assert levels[1].containing == ((0,), (0, 1), (1,))


def test_subset_hierarchy_on_a_complete_graph() -> None:
    edges = tuple((i, j) for i in range(4) for j in range(i + 1, 4))
    levels = subset_hierarchy(4, edges, 3)
    assert [len(level.subsets) for level in levels] == [4, 6, 4]
    assert len(levels[1].neighbors[0]) == 4


def test_encoder_shape_and_permutation_equivariance(bundle, graph) -> None:
    z = encode(graph, bundle.encoder).data
    assert z.shape == (5, 16)
    order = [3, 0, 4, 1, 2]
    z_perm = encode(graph.permuted(order), bundle.encoder).data
    np.testing.assert_allclose(z_perm, z[order], atol=1e-10)


def test_encoder_handles_a_single_vertex(bundle, rng, small_scene_cfg) -> None:
    scene = sample_scene(1, rng=rng, cfg=small_scene_cfg)
    single = build_graph(scene, scene, Assignment((0,), 0.0))
    assert encode(single, bundle.encoder).shape == (1, 16)


def embed(block: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    out[: block.shape[0], : block.shape[1]] = block
    return out


def test_encoder_matches_a_hand_unrolled_triangle(rng) -> None:
    encoder = GraphEncoder(EncoderConfig(hidden=8, layers=1, k_max=3), rng)
    encoder.zero_()
    # only the first two channels carry anything
    lift = np.array(
        [[0.5, -0.2], [0.1, 0.3], [-0.4, 0.2], [0.3, 0.1], [-0.1, 0.6], [0.2, -0.5]]
    )
    lift_b = np.array([0.05, -0.1])
    theta = [
        (np.array([[1.0, -0.5], [0.3, 0.8]]), np.array([[0.2, 0.4], [-0.6, 0.1]])),
        (np.array([[0.7, 0.2], [-0.3, 0.9]]), np.array([[-0.1, 0.5], [0.4, -0.2]])),
        (np.array([[0.6, -0.4], [0.5, 0.3]]), np.array([[0.3, 0.3], [0.2, -0.7]])),
    ]
    readout = [np.array([[1.0, 0.2], [-0.3, 0.5]]), np.array([[0.4, -0.6], [0.1, 0.2]])]
    readout.append(np.array([[-0.2, 0.3], [0.7, 0.1]]))
    readout_b = np.array([0.01, -0.02])
    encoder.lift.weight.data[...] = embed(lift, (6, 8))
    encoder.lift.bias.data[:2] = lift_b
    for level, (t1, t2) in zip(encoder.levels, theta):
        level.layers[0].theta1.data[...] = embed(t1, (8, 8))
        level.layers[0].theta2.data[...] = embed(t2, (8, 8))
    for k, block in enumerate(readout):
        encoder.readout.weight.data[8 * k : 8 * k + 2, :2] = block
    encoder.readout.bias.data[:2] = readout_b

    vertices = np.array(
        [
            [0.1, 0.2, 0.0, 0.3, 0.2, 0.0],
            [0.4, 0.1, 0.0, 0.1, 0.4, 0.0],
            [0.2, 0.4, 0.0, 0.4, 0.3, 0.0],
        ]
    )
    graph = RearrGraph(vertices=vertices, edges=((0, 1), (0, 2), (1, 2)), object_ids=(0, 1, 2))

    def relu(x):
        return np.maximum(x, 0.0)

    # vertices: each sees the other two
    x = vertices @ lift + lift_b
    t1, t2 = theta[0]
    f1 = [relu(x[i] @ t1 + np.maximum(*[x[j] @ t2 for j in range(3) if j != i])) for i in range(3)]
    # pairs {0,1}, {0,2}, {1,2} start from their members and see the other two pairs
    pairs = [(0, 1), (0, 2), (1, 2)]
    start = [np.maximum(f1[a], f1[b]) for a, b in pairs]
    t1, t2 = theta[1]
    f2 = [
        relu(start[p] @ t1 + np.maximum(*[start[q] @ t2 for q in range(3) if q != p]))
        for p in range(3)
    ]
    part2 = [np.maximum(*[f2[p] for p in range(3) if i in pairs[p]]) for i in range(3)]
    # the triangle starts from all three pairs and has no neighbours
    t1, _ = theta[2]
    f3 = relu(np.maximum(np.maximum(f2[0], f2[1]), f2[2]) @ t1)
    expected = np.array(
        [
            f1[i] @ readout[0] + part2[i] @ readout[1] + f3 @ readout[2] + readout_b
            for i in range(3)
        ]
    )

    z = encode(graph, encoder).data
    np.testing.assert_allclose(z[:, :2], expected, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(z[:, 2:], 0.0)


def test_selection_probabilities_normalise(bundle, graph) -> None:
    scores = select(encode(graph, bundle.encoder), bundle.selector)
    assert scores.rho.shape == (5,)
    assert np.all((scores.rho > 0) & (scores.rho < 1))
    assert scores.probs.sum() == pytest.approx(1.0)


def test_sample_node_follows_the_probabilities(rng) -> None:
    scores = SelectionScores(rho=np.array([0.0, 0.9, 0.0]), probs=np.array([0.0, 1.0, 0.0]))
    assert {sample_node(scores, rng) for _ in range(20)} == {1}


@pytest.mark.parametrize("probs", [[0.5, 0.5], [0.1, 0.2, 0.3, 0.4]])
def test_sample_node_frequencies_match_the_probabilities(probs, rng) -> None:
    probs = np.array(probs)
    scores = SelectionScores(rho=probs, probs=probs)
    draws = 10_000
    counts = np.bincount([sample_node(scores, rng) for _ in range(draws)], minlength=len(probs))
    # 3 sigma of the widest binomial here is 3 * sqrt(0.25 / 1e4) = 0.015
    np.testing.assert_array_less(np.abs(counts / draws - probs), 0.015)


def test_goal_score_matches_the_batched_scores(bundle, graph) -> None:
    z_i = encode(graph, bundle.encoder).data[1]
    deltas = np.array([[0.1, 0.0, 0.0], [0.0, -0.2, 0.0]])
    batched = goal_scores(z_i, deltas, bundle.goal)
    assert goal_score(z_i, deltas[1], bundle.goal) == pytest.approx(batched[1], abs=1e-12)


def test_proposal_dropout_modes(bundle, graph, rng) -> None:
    z_i = encode(graph, bundle.encoder).data[0]
    frozen = propose_deltas(z_i, 8, bundle.proposal, rng, DropoutMode.Eval)
    assert frozen.shape == (8, 3)
    np.testing.assert_array_equal(frozen, np.repeat(frozen[:1], 8, axis=0))
    sampled = propose_deltas(z_i, 8, bundle.proposal, rng, DropoutMode.Stochastic)
    assert len({tuple(row) for row in sampled}) > 1


def test_head_predictor_methods(bundle, graph) -> None:
    assert bundle.selection_scores(graph).shape == (5,)
    assert bundle.predict_delta(graph, 2).shape == (3,)
    scores = bundle.goal_scores(graph, 2, np.zeros((4, 3)))
    assert scores.shape == (4,)
    assert np.all((scores > 0) & (scores < 1))


def test_joint_loss_reaches_every_head(bundle, swap_samples, rng) -> None:
    sample = next(s for s in swap_samples if not s.augmented)
    loss, values = joint_loss(sample, bundle, rng=rng)
    assert values["loss"] == pytest.approx(
        values["selection"] + values["proposal"] + values["goal"]
    )
    loss.backward()
    for name, module in bundle.parameter_groups().items():
        assert any(np.any(p.grad != 0) for p in module.parameters()), name


def test_augmented_samples_only_train_the_goal_head(bundle, swap_samples, rng) -> None:
    negative = next(s for s in swap_samples if s.augmented)
    loss, values = joint_loss(negative, bundle, rng=rng)
    assert values["selection"] == 0.0 and values["proposal"] == 0.0
    loss.backward()
    assert all(np.all(p.grad == 0) for p in bundle.selector.parameters())
    assert all(np.all(p.grad == 0) for p in bundle.proposal.parameters())
    assert any(np.any(p.grad != 0) for p in bundle.goal.parameters())


def test_loss_weights_scale_the_total(bundle, swap_samples) -> None:
    sample = swap_samples[0]
    _, full = joint_loss(sample, bundle, mode=DropoutMode.Eval)
    _, goal_only = joint_loss(
        sample, bundle, LossWeights(selection=0.0, proposal=0.0, goal=1.0), mode=DropoutMode.Eval
    )
    assert goal_only["loss"] == pytest.approx(full["goal"])


def labelled_sample(graph, selected: int, delta, goal_delta, y_goal: int = 1) -> TrainingSample:
    return TrainingSample(
        graph=graph,
        y_nodes=np.eye(graph.num_vertices)[selected],
        selected=selected,
        delta=np.asarray(delta, dtype=np.float64),
        y_goal=y_goal,
        goal_delta=np.asarray(goal_delta, dtype=np.float64),
        augmented=False,
        sample_id="000000-000",
        problem_id=0,
        kind=MoveKind.ToGoal,
    )


def test_joint_loss_of_a_zeroed_bundle(bundle, graph) -> None:
    bundle.zero_()
    sample = labelled_sample(graph, 2, delta=[0.1, 0.0, 0.0], goal_delta=[0.1, 0.0, 0.0])
    _, values = joint_loss(sample, bundle, mode=DropoutMode.Eval)
    # every head outputs 0.5 or 0, so each BCE is ln 2 and the L2 term is |delta|
    assert values["selection"] == pytest.approx(np.log(2.0), abs=1e-12)
    assert values["proposal"] == pytest.approx(0.1, abs=1e-12)
    assert values["goal"] == pytest.approx(np.log(2.0), abs=1e-12)
    assert values["loss"] == pytest.approx(2 * np.log(2.0) + 0.1, abs=1e-12)
    assert values["loss"] == pytest.approx(1.48629, abs=1e-5)


def test_joint_loss_gradients_match_finite_differences(bundle, graph, rng) -> None:
    sample = labelled_sample(
        graph, 3, delta=rng.normal(0.0, 0.1, 3), goal_delta=rng.normal(0.0, 0.1, 3)
    )
    weights = LossWeights(selection=1.0, proposal=0.7, goal=1.3)

    def loss() -> Tensor:
        return joint_loss(sample, bundle, weights, mode=DropoutMode.Eval)[0]

    params = [p for module in bundle.parameter_groups().values() for p in module.parameters()]
    for p in params:
        p.zero_grad()
    loss().backward()
    entries = [(p, k) for p in params for k in range(p.data.size)]
    for pick in rng.choice(len(entries), size=20, replace=False):
        p, k = entries[pick]
        numeric = numeric_gradient(loss, p, indices=[k]).reshape(-1)[k]
        analytic = p.grad.reshape(-1)[k]
        assert analytic == pytest.approx(numeric, rel=1e-5, abs=1e-8), p


def test_joint_loss_rejects_unlabelled_samples(bundle, swap_samples) -> None:
    bad = replace(swap_samples[0], y_nodes=np.ones(2))
    with pytest.raises(MissingLabel):
        joint_loss(bad, bundle)
    with pytest.raises(MissingLabel):
        joint_loss(replace(swap_samples[0], selected=7), bundle)


def test_bundle_save_and_load(tmp_path, bundle, graph) -> None:
    bundle.trained = True
    bundle.save(str(tmp_path / "ckpt"))
    loaded = load_bundle(str(tmp_path / "ckpt"))
    loaded.require_trained()
    np.testing.assert_array_equal(loaded.selection_scores(graph), bundle.selection_scores(graph))
    np.testing.assert_array_equal(loaded.predict_delta(graph, 1), bundle.predict_delta(graph, 1))
    assert loaded.collision is None


def test_untrained_and_missing_bundles(tmp_path, bundle) -> None:
    with pytest.raises(UntrainedBundle):
        bundle.require_trained()
    with pytest.raises(MissingCheckpoint):
        load_bundle(str(tmp_path / "nowhere"))


def test_zeroed_bundle_gives_neutral_scores(bundle, graph) -> None:
    bundle.zero_()
    np.testing.assert_array_equal(bundle.selection_scores(graph), 0.5)
    np.testing.assert_array_equal(bundle.predict_delta(graph, 0), 0.0)
    assert isinstance(encode(graph, bundle.encoder), Tensor)
