from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from dbt.adapters.events.logging import AdapterLogger

from nerp.configs import AblationVariant, DropoutMode, ErrorReduction, Method, TraceStatus
from nerp.nerp_alignment import RearrGraph, align
from nerp.nerp_collision import CollisionChecker, LearnedCollisionChecker
from nerp.nerp_configs import FeatureOracleConfig, PlannerConfig
from nerp.nerp_exceptions import MissingCheckpoint, NoFeasibleDelta
from nerp.nerp_models import ModelBundle, encode, propose_deltas, sample_node, select
from nerp.nerp_models import goal_scores as score_goals
from nerp.nerp_reports import write_json
from nerp.nerp_scene import (
    FeatureOracle,
    Scene,
    apply_placement,
    displacements,
    fits_table,
    footprint_overlap,
    is_success,
    misplaced_ids,
)
from nerp.neural import functional as F, no_grad

logger = AdapterLogger("nerp")


def arrangement_error(graph: RearrGraph, reduction: ErrorReduction = ErrorReduction.Sum) -> float:
    """L2 distance of every vertex's current half to its target half, summed (or max)."""
    if graph.num_vertices == 0:
        return 0.0
    offsets = graph.offsets()
    return float(offsets.max() if reduction == ErrorReduction.Max else offsets.sum())


@dataclass
class RolloutStep:
    node: int
    object_id: int
    deltas: np.ndarray
    choice: int
    error: float

    @property
    def delta(self) -> np.ndarray:
        return self.deltas[self.choice]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "node": self.node,
            "object_id": self.object_id,
            "deltas": self.deltas.tolist(),
            "choice": self.choice,
            "error": self.error,
        }


@dataclass
class Rollout:
    steps: List[RolloutStep] = field(default_factory=list)
    error: float = np.inf

    @property
    def feasible(self) -> bool:
        return bool(self.steps) and np.isfinite(self.error)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": self.error if np.isfinite(self.error) else None,
            "steps": [s.to_dict() for s in self.steps],
        }


@dataclass
class PlanAction:
    """
    The executable first move of the best rollout. `points` are centroids of the
    surviving placements within r_ball of the best one; `c_map` holds their distance
    to it, so the minimum cost 0 is the best placement itself.
    """

    object_id: int
    delta: np.ndarray
    points: np.ndarray
    c_map: np.ndarray
    error: float
    best_rollout: int
    rollouts: List[Rollout] = field(default_factory=list)

    @property
    def best_point(self) -> np.ndarray:
        return self.points[int(np.argmin(self.c_map))]

    @property
    def e_trace(self) -> List[float]:
        return [s.error for s in self.rollouts[self.best_rollout].steps]

    def to_dict(self, with_rollouts: bool = False) -> Dict[str, Any]:
        payload = {
            "object_id": self.object_id,
            "delta": self.delta.tolist(),
            "points": self.points.tolist(),
            "c_map": self.c_map.tolist(),
            "error": self.error,
            "best_rollout": self.best_rollout,
            "e_trace": self.e_trace,
        }
        if with_rollouts:
            payload["rollouts"] = [r.to_dict() for r in self.rollouts]
        return payload


def default_checker(bundle: ModelBundle) -> CollisionChecker:
    if bundle.collision is None:
        raise MissingCheckpoint("The model bundle carries no collision network")
    return LearnedCollisionChecker(bundle.collision)


def perceive_graph(
    current: Scene, target: Scene, bundle: ModelBundle, oracle: FeatureOracle
) -> RearrGraph:
    _, graph = align(current, target, oracle.view(current), oracle.view(target), bundle.cfg.graph)
    return graph


def _pick_node(z, graph: RearrGraph, bundle: ModelBundle, cfg: PlannerConfig, rng) -> Optional[int]:
    if cfg.variant == AblationVariant.NoObjectSelection:
        misplaced = graph.misplaced(cfg.tol)
        return int(rng.choice(misplaced)) if misplaced else None
    return sample_node(select(z, bundle.selector), rng)


def _rollout(
    scene: Scene,
    graph: RearrGraph,
    bundle: ModelBundle,
    checker: CollisionChecker,
    horizon: int,
    cfg: PlannerConfig,
    rng: np.random.Generator,
) -> Rollout:
    """
    Simulate up to `horizon` moves. Every step samples a node, proposes B deltas,
    drops the ones leaving the table or colliding with the unselected objects, and
    commits the survivor the goal net likes best. A step with no survivor ends the
    rollout with infinite error.
    """
    mode = DropoutMode.Eval if cfg.variant == AblationVariant.NoDropout else DropoutMode.Stochastic
    rollout = Rollout()
    for _ in range(horizon):
        with no_grad():
            z = encode(graph, bundle.encoder)
            i = _pick_node(z, graph, bundle, cfg, rng)
            if i is None:
                break
            z_i = F.gather_rows(z, [i])
            deltas = propose_deltas(z_i, cfg.num_proposals, bundle.proposal, rng, mode)
        obj = scene.objects[i]
        moved = [obj.translated(d) for d in deltas]
        keep = np.ones(len(moved), dtype=bool)
        if cfg.check_table_bounds:
            keep &= np.array([fits_table(m, scene.table) for m in moved])
        others = scene.others(obj.id)
        if others and keep.any():
            scores = checker.pair_scores([m for m, k in zip(moved, keep) if k], others)
            keep[np.flatnonzero(keep)] = scores.max(axis=1) < cfg.epsilon
        survivors = deltas[keep]
        if survivors.shape[0] == 0:
            logger.debug(f"Rollout dies: no collision-free delta for object {obj.id}")
            rollout.error = np.inf
            return rollout
        if cfg.variant == AblationVariant.NoGoalSatisfaction:
            j = int(rng.integers(survivors.shape[0]))
        else:
            with no_grad():
                j = int(np.argmax(score_goals(z_i, survivors, bundle.goal)))
        graph = graph.moved(i, survivors[j])
        scene = apply_placement(scene, obj.id, survivors[j])
        e = arrangement_error(graph, cfg.error_reduction)
        rollout.steps.append(RolloutStep(i, obj.id, survivors, j, e))
        rollout.error = e
        if not graph.misplaced(cfg.tol):
            break
    return rollout


def _candidates(first: RolloutStep, centroid: np.ndarray, cfg: PlannerConfig):
    p_best = centroid + first.delta
    points = centroid + first.deltas
    dist = np.linalg.norm(points - p_best, axis=1)
    order = np.argsort(dist, kind="stable")
    order = order[dist[order] <= cfg.r_ball][: cfg.max_candidates]
    return points[order], dist[order]


def plan_step(
    current: Scene,
    target: Scene,
    bundle: ModelBundle,
    cfg: Optional[PlannerConfig] = None,
    rng: Optional[np.random.Generator] = None,
    checker: Optional[CollisionChecker] = None,
    oracle: Optional[FeatureOracle] = None,
    horizon: Optional[int] = None,
) -> Optional[PlanAction]:
    """
    One replanning round: run the rollouts to the remaining horizon and return the
    first action of the rollout with the lowest final error. Returns None when the
    perceived graph already has every object within tolerance.
    """
    cfg = cfg or PlannerConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    bundle.require_trained()
    checker = checker or default_checker(bundle)
    oracle = oracle or FeatureOracle(FeatureOracleConfig(seed=cfg.seed))
    horizon = cfg.horizon(len(current)) if horizon is None else horizon

    graph = perceive_graph(current, target, bundle, oracle)
    if not graph.misplaced(cfg.tol):
        return None
    seeds = rng.integers(2**63 - 1, size=cfg.n_rollouts)
    rollouts = [
        _rollout(current, graph, bundle, checker, horizon, cfg, np.random.default_rng(s))
        for s in seeds
    ]
    errors = np.array([r.error if r.feasible else np.inf for r in rollouts])
    if not np.isfinite(errors).any():
        raise NoFeasibleDelta(
            f"All {cfg.n_rollouts} rollouts found no collision-free placement at their first step"
        )
    best = int(np.argmin(errors))
    first = rollouts[best].steps[0]
    points, c_map = _candidates(first, current.get(first.object_id).centroid, cfg)
    return PlanAction(
        object_id=first.object_id,
        delta=first.delta.copy(),
        points=points,
        c_map=c_map,
        error=float(errors[best]),
        best_rollout=best,
        rollouts=rollouts,
    )


@dataclass
class EpisodeRecord:
    method: Method
    status: TraceStatus
    initial_horizon: int
    horizon_left: int
    attempts: int = 0
    failures: int = 0
    collisions: int = 0
    actions: List[PlanAction] = field(default_factory=list)
    horizon_trace: List[int] = field(default_factory=list)
    final_displacements: np.ndarray = field(default_factory=lambda: np.zeros(0))
    final_scene: Optional[Scene] = None
    misplaced: List[int] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == TraceStatus.Success

    @property
    def steps(self) -> int:
        return self.attempts - self.failures

    @property
    def final_error(self) -> float:
        if self.final_displacements.size == 0:
            return 0.0
        return float(self.final_displacements.mean())

    def to_dict(self, with_rollouts: bool = False) -> Dict[str, Any]:
        return {
            "method": str(self.method),
            "status": str(self.status),
            "initial_horizon": self.initial_horizon,
            "horizon_left": self.horizon_left,
            "attempts": self.attempts,
            "failures": self.failures,
            "collisions": self.collisions,
            "steps": self.steps,
            "final_error": self.final_error,
            "final_displacements": self.final_displacements.tolist(),
            "misplaced_ids": self.misplaced,
            "actions": [a.to_dict(with_rollouts) for a in self.actions],
        }


def plan_and_execute(
    current: Scene,
    target: Scene,
    bundle: ModelBundle,
    cfg: Optional[PlannerConfig] = None,
    rng: Optional[np.random.Generator] = None,
    checker: Optional[CollisionChecker] = None,
    features: Optional[FeatureOracleConfig] = None,
    margin: float = 0.005,
) -> EpisodeRecord:
    """
    Replan and teleport-execute until the arrangement is within tolerance. Each attempt
    spends one unit of horizon; a simulated execution failure refunds it. The loop also
    stops after `iteration_cap_factor` times the initial horizon attempts.
    """
    cfg = cfg or PlannerConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    checker = checker or default_checker(bundle)
    oracle = FeatureOracle(features or FeatureOracleConfig(seed=cfg.seed))
    exec_rng = np.random.default_rng(int(rng.integers(2**63 - 1)))

    h0 = cfg.horizon(len(current))
    record = EpisodeRecord(Method.Nerp, TraceStatus.Success, h0, h0)
    scene, h = current, h0
    while True:
        record.horizon_trace.append(h)
        if is_success(scene, target, cfg.tol):
            record.status = TraceStatus.Success
            break
        if h <= 0:
            record.status = TraceStatus.OutOfPlanningBudget
            break
        if record.attempts >= cfg.iteration_cap_factor * h0:
            record.status = TraceStatus.IterationCap
            break
        try:
            action = plan_step(scene, target, bundle, cfg, rng, checker, oracle, horizon=h)
        except NoFeasibleDelta as exc:
            logger.debug(str(exc))
            record.status = TraceStatus.NoFeasibleDelta
            break
        if action is None:
            record.status = TraceStatus.PlannerConverged
            break
        record.attempts += 1
        record.actions.append(action)
        h -= 1
        if cfg.p_fail > 0 and exec_rng.random() < cfg.p_fail:
            record.failures += 1
            h += 1
            continue
        placed = scene.get(action.object_id).translated(action.delta)
        record.collisions += int(
            any(footprint_overlap(placed, o, margin) for o in scene.others(action.object_id))
        )
        scene = apply_placement(scene, action.object_id, action.delta)
        logger.debug(f"Executed object {action.object_id}, h={h}, e={action.error:.4f}")
    record.horizon_left = h
    record.final_scene = scene
    record.final_displacements = displacements(scene, target)
    record.misplaced = misplaced_ids(scene, target, cfg.tol)
    return record


def write_plan(path: str, record: EpisodeRecord, with_rollouts: bool = False) -> None:
    write_json(record.to_dict(with_rollouts), path)
