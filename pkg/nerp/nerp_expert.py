import json
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dbt.adapters.events.logging import AdapterLogger

from nerp.configs import Method, MoveKind, TraceStatus
from nerp.nerp_alignment import ground_truth_assignment, hungarian, similarity
from nerp.nerp_collision import CollisionChecker, OracleCollisionChecker, is_free
from nerp.nerp_configs import ExpertConfig, FeatureOracleConfig
from nerp.nerp_exceptions import CorruptRecord
from nerp.nerp_scene import (
    FeatureOracle,
    Scene,
    SceneObject,
    apply_placement,
    displacements,
    is_success,
    sample_table_position,
)

logger = AdapterLogger("nerp")

# goal position (x, y, z) per object id, as the planner perceives it
GoalMap = Dict[int, np.ndarray]
Perceive = Callable[[Scene], GoalMap]


@dataclass(frozen=True, eq=False)
class MoveRecord:
    object_id: int
    delta: np.ndarray
    kind: MoveKind
    scene_before: Scene
    scene_after: Scene

    def to_dict(self, step: int) -> Dict:
        return {
            "step": step,
            "object_id": int(self.object_id),
            "delta": self.delta.tolist(),
            "kind": str(self.kind),
            "before": self.scene_before.content_hash(),
            "after": self.scene_after.content_hash(),
        }


@dataclass
class ExpertTrace:
    method: Method
    moves: List[MoveRecord] = field(default_factory=list)
    status: TraceStatus = TraceStatus.BudgetExhausted
    final_displacements: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def success(self) -> bool:
        return self.status == TraceStatus.Success

    @property
    def steps(self) -> int:
        return len(self.moves)

    @property
    def final_error(self) -> float:
        if self.final_displacements.size == 0:
            return 0.0
        return float(self.final_displacements.mean())

    def final_scene(self, start: Scene) -> Scene:
        return self.moves[-1].scene_after if self.moves else start


def _move(scene: Scene, object_id: int, delta, kind: MoveKind) -> MoveRecord:
    delta = np.asarray(delta, dtype=np.float64)
    after = apply_placement(scene, object_id, delta)
    return MoveRecord(object_id, delta, kind, scene, after)


def _finish(trace: ExpertTrace, scene: Scene, target: Scene, cfg: ExpertConfig) -> ExpertTrace:
    trace.final_displacements = displacements(scene, target)
    if is_success(scene, target, cfg.tol):
        trace.status = TraceStatus.Success
    return trace


def _misplaced(scene: Scene, goals: GoalMap, tol: float) -> List[int]:
    return [o.id for o in scene.objects if np.linalg.norm(o.position - goals[o.id]) > tol]


def sample_storage(
    scene: Scene,
    object_id: int,
    checker: CollisionChecker,
    rng: np.random.Generator,
    cfg: ExpertConfig,
    avoid: Sequence[SceneObject] = (),
) -> Optional[np.ndarray]:
    """
    Uniform storage placement for `object_id`, free of every other object and of the
    `avoid` footprints. Candidates are scored in batches; None after the attempt limit.
    """
    obj = scene.get(object_id)
    obstacles = scene.others(object_id) + list(avoid)
    tried = 0
    while tried < cfg.storage_attempts:
        count = min(cfg.storage_batch, cfg.storage_attempts - tried)
        tried += count
        spots = [sample_table_position(obj.shape, scene.table, rng) for _ in range(count)]
        if not obstacles:
            return spots[0]
        candidates = [obj.placed_at(p) for p in spots]
        free = checker.pair_scores(candidates, obstacles).max(axis=1) < cfg.epsilon
        if free.any():
            return spots[int(np.argmax(free))]
    return None


def _blockers(
    scene: Scene, placed: SceneObject, checker: CollisionChecker, epsilon: float
) -> List[int]:
    others = scene.others(placed.id)
    if not others:
        return []
    scores = checker.pair_scores([placed], others)[0]
    return sorted(o.id for o, s in zip(others, scores) if s >= epsilon)


def greedy_plan(
    current: Scene,
    target: Scene,
    perceive: Perceive,
    checker: CollisionChecker,
    budget: int,
    rng: np.random.Generator,
    cfg: ExpertConfig,
    method: Method,
) -> ExpertTrace:
    """
    Shared loop of the expert and the classical heuristic: pick a random misplaced
    object, park every object blocking its goal in storage (id order), then place it.
    Each move, including a failed storage search, spends one unit of budget.
    """
    trace = ExpertTrace(method=method)
    scene, left = current, budget
    while True:
        goals = perceive(scene)
        misplaced = _misplaced(scene, goals, cfg.tol)
        if not misplaced:
            trace.status = TraceStatus.PlannerConverged
            break
        if left <= 0:
            trace.status = TraceStatus.BudgetExhausted
            break
        object_id = int(rng.choice(misplaced))
        obj = scene.get(object_id)
        at_goal = obj.placed_at(goals[object_id])
        for blocker in _blockers(scene, at_goal, checker, cfg.epsilon):
            if left <= 0:
                break
            left -= 1
            spot = sample_storage(scene, blocker, checker, rng, cfg, avoid=[at_goal])
            if spot is None:
                logger.debug(f"No storage spot for object {blocker}")
                break
            record = _move(scene, blocker, spot - scene.get(blocker).position, MoveKind.ToStorage)
            trace.moves.append(record)
            scene = record.scene_after
        if left <= 0 or not is_free(checker, at_goal, scene.others(object_id), cfg.epsilon):
            continue
        left -= 1
        record = _move(scene, object_id, goals[object_id] - obj.position, MoveKind.ToGoal)
        trace.moves.append(record)
        scene = record.scene_after
    return _finish(trace, scene, target, cfg)


def ground_truth_goals(target: Scene) -> Perceive:
    def perceive(scene: Scene) -> GoalMap:
        truth = ground_truth_assignment(scene, target)
        return {
            o.id: target.objects[j].position for o, j in zip(scene.objects, truth.perm)
        }

    return perceive


def feature_goals(target: Scene, oracle: FeatureOracle) -> Perceive:
    """Goals from descriptor alignment, re-observed on every call."""

    def perceive(scene: Scene) -> GoalMap:
        assignment = hungarian(similarity(oracle.view(scene), oracle.view(target)))
        return {
            o.id: target.objects[j].position for o, j in zip(scene.objects, assignment.perm)
        }

    return perceive


def expert_plan(
    current: Scene,
    target: Scene,
    budget: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    cfg: Optional[ExpertConfig] = None,
    margin: float = 0.005,
) -> ExpertTrace:
    """Model-based expert: ground-truth correspondence and the geometric oracle."""
    cfg = cfg or ExpertConfig()
    budget = cfg.budget_factor * len(current) if budget is None else budget
    rng = rng if rng is not None else np.random.default_rng()
    return greedy_plan(
        current,
        target,
        ground_truth_goals(target),
        OracleCollisionChecker(margin),
        budget,
        rng,
        cfg,
        Method.Expert,
    )


def classical_heuristic_plan(
    current: Scene,
    target: Scene,
    checker: CollisionChecker,
    budget: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    cfg: Optional[ExpertConfig] = None,
    features: Optional[FeatureOracleConfig] = None,
) -> ExpertTrace:
    """The expert's loop on perceived data: feature alignment and a collision scorer."""
    cfg = cfg or ExpertConfig()
    budget = cfg.budget_factor * len(current) if budget is None else budget
    rng = rng if rng is not None else np.random.default_rng()
    oracle = FeatureOracle(features or FeatureOracleConfig())
    return greedy_plan(
        current,
        target,
        feature_goals(target, oracle),
        checker,
        budget,
        rng,
        cfg,
        Method.ClassicalHeuristic,
    )


def _random_action(
    scene: Scene,
    goals: GoalMap,
    checker: CollisionChecker,
    rng: np.random.Generator,
    cfg: ExpertConfig,
) -> Optional[Tuple[int, np.ndarray, MoveKind]]:
    """Random object: to its goal if free, else to storage; an object at its goal wastes a move."""
    object_id = int(rng.choice(scene.ids))
    obj = scene.get(object_id)
    at_goal = obj.placed_at(goals[object_id])
    if np.linalg.norm(obj.position - goals[object_id]) <= cfg.tol:
        return object_id, np.zeros(3), MoveKind.ToGoal
    if is_free(checker, at_goal, scene.others(object_id), cfg.epsilon):
        return object_id, goals[object_id] - obj.position, MoveKind.ToGoal
    spot = sample_storage(scene, object_id, checker, rng, cfg)
    if spot is None:
        return None
    return object_id, spot - obj.position, MoveKind.ToStorage


def _perceived_error(scene: Scene, goals: GoalMap) -> float:
    return float(sum(np.linalg.norm(o.position - goals[o.id]) for o in scene.objects))


def classical_random_plan(
    current: Scene,
    target: Scene,
    checker: CollisionChecker,
    n_rollouts: int = 16,
    horizon: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    cfg: Optional[ExpertConfig] = None,
    features: Optional[FeatureOracleConfig] = None,
) -> ExpertTrace:
    """
    Random-selection rollouts inside the replanning loop: simulate `n_rollouts` random
    sequences to the remaining horizon, execute the first action of the one with the
    lowest final error (ties to the earliest rollout), then replan.
    """
    cfg = cfg or ExpertConfig()
    rng = rng if rng is not None else np.random.default_rng()
    h = cfg.budget_factor * len(current) if horizon is None else horizon
    perceive = feature_goals(target, FeatureOracle(features or FeatureOracleConfig()))
    trace = ExpertTrace(method=Method.ClassicalRandom)
    scene = current
    while True:
        goals = perceive(scene)
        if not _misplaced(scene, goals, cfg.tol):
            trace.status = TraceStatus.PlannerConverged
            break
        if h <= 0:
            trace.status = TraceStatus.BudgetExhausted
            break
        best_error, best_action = np.inf, None
        for _ in range(n_rollouts):
            sim, first, error = scene, None, np.inf
            for _ in range(h):
                action = _random_action(sim, goals, checker, rng, cfg)
                if action is None:
                    break
                first = first or action
                sim = apply_placement(sim, action[0], action[1])
                error = _perceived_error(sim, goals)
                if error == 0.0:
                    break
            if first is not None and error < best_error:
                best_error, best_action = error, first
        h -= 1
        if best_action is None:
            logger.debug("Every random rollout failed at its first step")
            continue
        record = _move(scene, *best_action)
        trace.moves.append(record)
        scene = record.scene_after
    return _finish(trace, scene, target, cfg)


def replay_trace(start: Scene, trace: ExpertTrace) -> Scene:
    """Re-apply every recorded move; raises if a recorded scene is not reproduced bit for bit."""
    scene = start
    for step, move in enumerate(trace.moves):
        if scene.content_hash() != move.scene_before.content_hash():
            raise CorruptRecord("<trace>", step, "scene before the move does not match replay")
        scene = apply_placement(scene, move.object_id, move.delta)
        if scene.content_hash() != move.scene_after.content_hash():
            raise CorruptRecord("<trace>", step, "replayed scene differs from the recorded one")
    return scene


def write_trace(path: str, trace: ExpertTrace) -> None:
    """One MoveRecord per JSON line; scene snapshots go to `<path>.scenes.json` keyed by hash."""
    scenes = {}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        for step, move in enumerate(trace.moves):
            for snapshot in (move.scene_before, move.scene_after):
                scenes[snapshot.content_hash()] = snapshot.to_dict()
            f.write(json.dumps(move.to_dict(step), sort_keys=True) + "\n")
    with open(f"{path}.scenes.json", "w") as f:
        json.dump(
            {"method": str(trace.method), "status": str(trace.status), "scenes": scenes},
            f,
            sort_keys=True,
        )


def read_trace(path: str) -> ExpertTrace:
    with open(f"{path}.scenes.json") as f:
        header = json.load(f)
    scenes = {h: Scene.from_dict(s) for h, s in header["scenes"].items()}
    trace = ExpertTrace(method=Method(header["method"]), status=TraceStatus(header["status"]))
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            try:
                row = json.loads(line)
                trace.moves.append(
                    MoveRecord(
                        object_id=row["object_id"],
                        delta=np.asarray(row["delta"], dtype=np.float64),
                        kind=MoveKind(row["kind"]),
                        scene_before=scenes[row["before"]],
                        scene_after=scenes[row["after"]],
                    )
                )
            except (ValueError, KeyError) as exc:
                raise CorruptRecord(path, line_no, str(exc)) from exc
    return trace
