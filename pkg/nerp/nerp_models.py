import itertools
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from dbt.adapters.events.logging import AdapterLogger

from nerp.__version__ import version as nerp_version
from nerp.configs import DropoutMode
from nerp.nerp_alignment import RearrGraph
from nerp.nerp_collision import CollisionNet
from nerp.nerp_configs import EncoderConfig, LossWeights, ModelConfig, SAConfig
from nerp.nerp_exceptions import MissingLabel, UntrainedBundle
from nerp.neural import (
    MLP,
    Linear,
    Module,
    Param,
    Tensor,
    no_grad,
    read_checkpoint,
    restore_params,
    save_checkpoint,
)
from nerp.neural import functional as F
from nerp.neural.layers import glorot

if TYPE_CHECKING:
    from nerp.nerp_datagen import TrainingSample

logger = AdapterLogger("nerp")

BUNDLE_FILE = "bundle.json"
COLLISION_FILE = "collision.json"


@dataclass(frozen=True)
class SubsetLevel:
    """Connected k-subsets of the graph and the index structure the k-GNN layers need."""

    subsets: Tuple[Tuple[int, ...], ...]
    neighbors: Tuple[Tuple[int, ...], ...]
    children: Tuple[Tuple[int, ...], ...]
    containing: Tuple[Tuple[int, ...], ...]


def _connected(subset: Tuple[int, ...], edge_set) -> bool:
    reached, frontier = {subset[0]}, [subset[0]]
    while frontier:
        v = frontier.pop()
        for w in subset:
            if w not in reached and (min(v, w), max(v, w)) in edge_set:
                reached.add(w)
                frontier.append(w)
    return len(reached) == len(subset)


@lru_cache(maxsize=512)
def subset_hierarchy(
    n: int, edges: Tuple[Tuple[int, int], ...], k_max: int
) -> Tuple[SubsetLevel, ...]:
    edge_set = {(i, j) for i, j in edges if i != j}
    adjacency = [[] for _ in range(n)]
    for i, j in edges:
        adjacency[i].append(j)
        if i != j:
            adjacency[j].append(i)
    levels = [
        SubsetLevel(
            subsets=tuple((i,) for i in range(n)),
            neighbors=tuple(tuple(sorted(a)) for a in adjacency),
            children=tuple((i,) for i in range(n)),
            containing=tuple((i,) for i in range(n)),
        )
    ]
    for k in range(2, k_max + 1):
        subsets = [s for s in itertools.combinations(range(n), k) if _connected(s, edge_set)]
        position = {s: idx for idx, s in enumerate(subsets)}
        previous = {s: idx for idx, s in enumerate(levels[-1].subsets)}
        neighbors, children = [], []
        for s in subsets:
            local = []
            for v in s:
                base = tuple(x for x in s if x != v)
                for w in range(n):
                    if w in s or (min(v, w), max(v, w)) not in edge_set:
                        continue
                    t = tuple(sorted(base + (w,)))
                    if t in position:
                        local.append(position[t])
            neighbors.append(tuple(sorted(set(local))))
            children.append(
                tuple(previous[c] for c in itertools.combinations(s, k - 1) if c in previous)
            )
        containing = tuple(
            tuple(idx for idx, s in enumerate(subsets) if i in s) for i in range(n)
        )
        levels.append(
            SubsetLevel(tuple(subsets), tuple(neighbors), tuple(children), containing)
        )
    return tuple(levels)


def _padded_max(x: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """Group max where an empty group yields the zero vector."""
    zero_row = x.shape[0]
    padded = F.concat([x, Tensor(np.zeros((1, x.shape[1])))], axis=0)
    return F.max_aggregate(padded, [list(g) if len(g) else [zero_row] for g in groups])


class KGNNLayer(Module):
    """f'(g) = ReLU(f(g) Theta1 + max over local neighbours g' of f(g') Theta2)."""

    def __init__(self, hidden: int, rng: np.random.Generator) -> None:
        self.theta1 = Param(glorot(rng, hidden, hidden))
        self.theta2 = Param(glorot(rng, hidden, hidden))

    def __call__(self, f: Tensor, neighbors: Sequence[Sequence[int]]) -> Tensor:
        own = F.matmul(f, self.theta1)
        messages = _padded_max(F.matmul(f, self.theta2), neighbors)
        return F.relu(F.add(own, messages))


class KGNNLevel(Module):
    def __init__(self, hidden: int, layers: int, rng: np.random.Generator) -> None:
        self.layers = [KGNNLayer(hidden, rng) for _ in range(layers)]

    def __call__(self, f: Tensor, neighbors: Sequence[Sequence[int]]) -> Tensor:
        for layer in self.layers:
            f = layer(f, neighbors)
        return f


class GraphEncoder(Module):
    """
    Hierarchical 1-2-3 k-GNN encoder f_Theta.

    Vertices (V^i in R^6) are lifted to H; each level runs its own k-GNN layers, a
    level-k subset starts as the max over its (k-1)-subsets. The per-object embedding
    concatenates the vertex embedding with the max over the 2- and 3-subsets holding
    the vertex and projects back to H.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.lift = Linear(6, cfg.hidden, rng)
        self.levels = [KGNNLevel(cfg.hidden, cfg.layers, rng) for _ in range(cfg.k_max)]
        self.readout = Linear(cfg.k_max * cfg.hidden, cfg.hidden, rng)

    def __call__(self, graph: RearrGraph) -> Tensor:
        hidden = self.cfg.hidden
        n = graph.num_vertices
        hierarchy = subset_hierarchy(n, tuple(graph.edges), self.cfg.k_max)
        f = self.levels[0](self.lift(Tensor(graph.vertices)), hierarchy[0].neighbors)
        parts, previous = [f], f
        for level, module in zip(hierarchy[1:], self.levels[1:]):
            if not level.subsets:
                # no connected k-subsets, so none at higher levels either
                parts.append(Tensor(np.zeros((n, hidden))))
                continue
            start = _padded_max(previous, level.children)
            previous = module(start, level.neighbors)
            parts.append(_padded_max(previous, level.containing))
        return self.readout(F.concat(parts, axis=1))


def encode(graph: RearrGraph, encoder: GraphEncoder) -> Tensor:
    return encoder(graph)


@dataclass(frozen=True)
class SelectionScores:
    rho: np.ndarray
    probs: np.ndarray


def select(z: Tensor, selector: MLP) -> SelectionScores:
    rho = selector(z).data[:, 0]
    # sigmoid can underflow to exactly 0 far from the origin
    weights = np.maximum(rho, np.finfo(np.float64).tiny)
    return SelectionScores(rho=rho, probs=weights / weights.sum())


def sample_node(scores: SelectionScores, rng: np.random.Generator) -> int:
    return int(rng.choice(scores.probs.shape[0], p=scores.probs))


def _row(z_i) -> Tensor:
    if isinstance(z_i, Tensor):
        return z_i if z_i.data.ndim == 2 else F.reshape(z_i, (1, -1))
    return Tensor(np.asarray(z_i, dtype=np.float64).reshape(1, -1))


def propose_deltas(
    z_i,
    num: int,
    proposal: MLP,
    rng: Optional[np.random.Generator] = None,
    mode: DropoutMode = DropoutMode.Stochastic,
) -> np.ndarray:
    """B replicas of z_i through pi_Omega; dropout masks differ per replica."""
    replicas = F.gather_rows(_row(z_i), np.zeros(num, dtype=np.int64))
    return proposal(replicas, mode, rng).data


def goal_scores(z_i, deltas, goal_net: MLP) -> np.ndarray:
    deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    replicas = F.gather_rows(_row(z_i), np.zeros(deltas.shape[0], dtype=np.int64))
    return goal_net(F.concat([replicas, Tensor(deltas)], axis=1)).data[:, 0]


def goal_score(z_i, delta, goal_net: MLP) -> float:
    return float(goal_scores(z_i, delta, goal_net)[0])


class HeadPredictor(Protocol):
    def selection_scores(self, graph: RearrGraph) -> np.ndarray:
        ...

    def predict_delta(self, graph: RearrGraph, i: int) -> np.ndarray:
        ...

    def goal_scores(self, graph: RearrGraph, i: int, deltas: np.ndarray) -> np.ndarray:
        ...


class ModelBundle:
    """The jointly trained encoder, selector, proposal and goal nets, plus the collision net."""

    def __init__(
        self,
        cfg: Optional[ModelConfig] = None,
        seed: int = 0,
        collision: Optional[CollisionNet] = None,
        trained: bool = False,
    ) -> None:
        self.cfg = cfg or ModelConfig()
        self.seed = seed
        self.trained = trained
        self.collision = collision
        h = self.cfg.encoder.hidden
        rng = np.random.default_rng(seed)
        self.encoder = GraphEncoder(self.cfg.encoder, rng)
        self.selector = MLP([h, h, h // 2, 1], rng, output="sigmoid")
        self.proposal = MLP(
            [h, h, 3 * h // 4, h // 2, h // 4, 3],
            rng,
            dropout_p=self.cfg.dropout_p,
            dropout_layers=(0, 1, 2),
        )
        self.goal = MLP([h + 3, h, h // 2, 1], rng, output="sigmoid")

    def parameter_groups(self) -> Dict[str, Module]:
        return {
            "encoder": self.encoder,
            "selector": self.selector,
            "proposal": self.proposal,
            "goal": self.goal,
        }

    def named_parameters(self) -> Iterator[Tuple[str, Param]]:
        for group, module in self.parameter_groups().items():
            yield from module.named_parameters(f"{group}.")

    def parameters(self) -> List[Param]:
        return [p for _, p in self.named_parameters()]

    def zero_(self) -> "ModelBundle":
        for module in self.parameter_groups().values():
            module.zero_()
        return self

    def require_trained(self) -> None:
        if not self.trained:
            raise UntrainedBundle("The model bundle has not been trained or loaded")

    def selection_scores(self, graph: RearrGraph) -> np.ndarray:
        with no_grad():
            return select(encode(graph, self.encoder), self.selector).rho

    def predict_delta(self, graph: RearrGraph, i: int) -> np.ndarray:
        with no_grad():
            z = encode(graph, self.encoder)
            return propose_deltas(F.gather_rows(z, [i]), 1, self.proposal, mode=DropoutMode.Eval)[0]

    def goal_scores(self, graph: RearrGraph, i: int, deltas: np.ndarray) -> np.ndarray:
        with no_grad():
            z = encode(graph, self.encoder)
            return goal_scores(F.gather_rows(z, [i]), deltas, self.goal)

    def header(self) -> Dict:
        return {
            "model": self.cfg.to_dict(),
            "seed": self.seed,
            "trained": self.trained,
            "nerp_version": nerp_version,
        }

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, BUNDLE_FILE)
        save_checkpoint(path, self.named_parameters(), self.header())
        if self.collision is not None:
            save_collision_net(self.collision, os.path.join(directory, COLLISION_FILE))
        logger.info(f"Saved model bundle to {directory}")


def save_collision_net(net: CollisionNet, path: str) -> None:
    header = {"sa": net.cfg.to_dict(), "nerp_version": nerp_version}
    save_checkpoint(path, net.named_parameters(), header)


def load_collision_net(path: str) -> CollisionNet:
    payload = read_checkpoint(path)
    net = CollisionNet(SAConfig.from_dict(payload["header"]["sa"]))
    restore_params(payload, net.named_parameters())
    return net


def load_bundle(directory: str) -> ModelBundle:
    payload = read_checkpoint(os.path.join(directory, BUNDLE_FILE))
    header = payload["header"]
    bundle = ModelBundle(
        ModelConfig.from_dict(header["model"]),
        seed=header.get("seed", 0),
        trained=header.get("trained", False),
    )
    restore_params(payload, bundle.named_parameters())
    collision_path = os.path.join(directory, COLLISION_FILE)
    if os.path.exists(collision_path):
        bundle.collision = load_collision_net(collision_path)
    logger.debug(f"Loaded model bundle from {directory}")
    return bundle


def joint_loss(
    sample: "TrainingSample",
    bundle: ModelBundle,
    weights: Optional[LossWeights] = None,
    rng: Optional[np.random.Generator] = None,
    mode: DropoutMode = DropoutMode.Train,
) -> Tuple[Tensor, Dict[str, float]]:
    """
    Selection BCE over node labels + L2 between the proposed and expert delta of the
    selected node + goal-satisfaction BCE. Augmented goal negatives only carry the
    last term.
    """
    weights = weights or bundle.cfg.loss_weights
    n = sample.graph.num_vertices
    if sample.selected is None or not 0 <= sample.selected < n:
        raise MissingLabel(f"Sample {sample.sample_id} has no valid selected node")
    if sample.y_goal not in (0, 1):
        raise MissingLabel(f"Sample {sample.sample_id} has no goal-satisfaction label")
    z = encode(sample.graph, bundle.encoder)
    z_i = F.gather_rows(z, [sample.selected])
    terms: List[Tensor] = []
    values: Dict[str, float] = {"selection": 0.0, "proposal": 0.0, "goal": 0.0}

    if not sample.augmented:
        y_nodes = np.asarray(sample.y_nodes, dtype=np.float64)
        if y_nodes.shape != (n,) or y_nodes.sum() != 1:
            raise MissingLabel(f"Sample {sample.sample_id} needs exactly one selected node")
        rho = F.reshape(bundle.selector(z), (n,))
        selection = F.bce(rho, y_nodes)
        delta_hat = bundle.proposal(z_i, mode, rng)
        proposal = F.l2_loss(delta_hat, sample.delta)
        terms += [F.scale(selection, weights.selection), F.scale(proposal, weights.proposal)]
        values["selection"], values["proposal"] = selection.item(), proposal.item()

    goal_in = F.concat([z_i, Tensor(np.asarray(sample.goal_delta).reshape(1, 3))], axis=1)
    goal = F.bce(bundle.goal(goal_in), np.array([[float(sample.y_goal)]]))
    terms.append(F.scale(goal, weights.goal))
    values["goal"] = goal.item()

    loss = F.total(terms)
    values["loss"] = loss.item()
    return loss, values
