import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
from dbt.adapters.events.logging import AdapterLogger
from dbt_common.dataclass_schema import dbtClassMixin

from nerp.configs import MoveKind, Split
from nerp.nerp_alignment import (
    Assignment,
    RearrGraph,
    align,
    build_graph,
    correspondence_accuracy,
    ground_truth_assignment,
)
from nerp.nerp_configs import DatasetConfig, FeatureOracleConfig, GraphConfig
from nerp.nerp_exceptions import CorruptRecord, NerpValidationError, TargetInfeasible
from nerp.nerp_expert import ExpertTrace, expert_plan, read_trace, replay_trace, write_trace
from nerp.nerp_scene import FeatureOracle, Scene, make_target_by_swap, sample_scene

logger = AdapterLogger("nerp")

DATASET_FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
TRACES_DIR = "traces"
TARGET_RETRIES = 10


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """
    One expert step: the graph of the scene before the move (against the final target),
    the moved node, the expert displacement and the goal-satisfaction label.
    `goal_delta` is what the goal net scores; augmented negatives perturb it.
    """

    graph: RearrGraph
    y_nodes: np.ndarray
    selected: int
    delta: np.ndarray
    y_goal: int
    goal_delta: np.ndarray
    augmented: bool
    sample_id: str
    problem_id: int
    kind: MoveKind


@dataclass
class DatasetManifest(dbtClassMixin):
    format_version: int
    num_problems: int
    seed: int
    noise_sigma: float
    object_counts: Dict[str, int]
    splits: Dict[str, Dict[str, Any]]
    skipped: List[int] = field(default_factory=list)
    negatives: Dict[str, int] = field(default_factory=dict)
    alignment_accuracy: float = 1.0
    config: Dict[str, Any] = field(default_factory=dict)
    traces: List[str] = field(default_factory=list)

    def total_samples(self) -> int:
        return sum(entry["samples"] for entry in self.splits.values())


@dataclass
class _Problem:
    problem_id: int
    rows: List[Dict[str, Any]]
    trace: Optional[ExpertTrace]
    alignment_accuracy: float
    num_objects: int


def _annulus_offset(rng: np.random.Generator, low: float, high: float) -> np.ndarray:
    radius = rng.uniform(low, high)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([radius * np.cos(angle), radius * np.sin(angle), 0.0])


def _row(
    sample_id: str,
    problem_id: int,
    current: Scene,
    target: Scene,
    assignment: Assignment,
    selected: int,
    delta: np.ndarray,
    goal_delta: np.ndarray,
    y_goal: int,
    kind: MoveKind,
    augmented: bool,
) -> Dict[str, Any]:
    return {
        "sample_id": sample_id,
        "problem_id": problem_id,
        "current": current.to_dict(),
        "target": target.to_dict(),
        "perm": list(assignment.perm),
        "selected": selected,
        "delta": delta.tolist(),
        "goal_delta": goal_delta.tolist(),
        "y_goal": y_goal,
        "kind": str(kind),
        "augmented": augmented,
    }


def _sample_problem(
    cfg: DatasetConfig, problem_id: int
) -> Tuple[Scene, Scene, np.random.Generator]:
    rng = np.random.default_rng([cfg.seed, problem_id])
    for attempt in range(TARGET_RETRIES):
        scene = sample_scene(cfg.num_objects, rng=rng, cfg=cfg.scene)
        try:
            return scene, make_target_by_swap(scene, rng, cfg.scene.margin), rng
        except TargetInfeasible:
            logger.debug(f"Problem {problem_id}: no swap target on attempt {attempt + 1}")
    raise TargetInfeasible(f"Problem {problem_id}: no swap target after {TARGET_RETRIES} scenes")


def generate_problem(cfg: DatasetConfig, problem_id: int) -> _Problem:
    """Sample one swap problem, solve it with the expert and emit its sample rows."""
    current, target, rng = _sample_problem(cfg, problem_id)
    oracle = FeatureOracle(
        FeatureOracleConfig(
            dim=cfg.scene.feature_dim,
            noise_sigma=cfg.noise_sigma,
            seed=int(rng.integers(2**31 - 1)),
        )
    )
    trace = expert_plan(current, target, rng=rng, cfg=cfg.expert, margin=cfg.scene.margin)
    if not trace.success:
        logger.debug(f"Problem {problem_id}: expert ended with {trace.status}, skipped")
        return _Problem(problem_id, [], None, 0.0, len(current))

    rows: List[Dict[str, Any]] = []
    hits = []
    for step, move in enumerate(trace.moves):
        before = move.scene_before
        assignment, _ = align(before, target, oracle.view(before), oracle.view(target))
        hits.append(correspondence_accuracy(assignment, ground_truth_assignment(before, target)))
        selected = before.index_of(move.object_id)
        y_goal = int(move.kind == MoveKind.ToGoal)
        sample_id = f"{problem_id:06d}-{step:03d}"
        rows.append(
            _row(
                sample_id, problem_id, before, target, assignment, selected,
                move.delta, move.delta, y_goal, move.kind, False,
            )
        )
        if y_goal:
            u = _annulus_offset(rng, cfg.annulus[0] * cfg.tol, cfg.annulus[1] * cfg.tol)
            rows.append(
                _row(
                    f"{sample_id}-neg", problem_id, before, target, assignment, selected,
                    move.delta, move.delta + u, 0, move.kind, True,
                )
            )
    return _Problem(problem_id, rows, trace, float(np.mean(hits)), len(current))


def _split_problems(cfg: DatasetConfig, problem_ids: List[int]) -> Dict[Split, List[int]]:
    order = list(np.random.default_rng(cfg.seed).permutation(problem_ids))
    n = len(order)
    n_train = int(round(cfg.split_fractions[0] * n))
    n_val = int(round(cfg.split_fractions[1] * n))
    return {
        Split.Train: sorted(int(p) for p in order[:n_train]),
        Split.Val: sorted(int(p) for p in order[n_train : n_train + n_val]),
        Split.Test: sorted(int(p) for p in order[n_train + n_val :]),
    }


def generate_dataset(out_dir: str, cfg: Optional[DatasetConfig] = None) -> DatasetManifest:
    """
    Writes `<split>.jsonl` sample files and `manifest.json` under `out_dir`. Problems run
    on `cfg.workers` threads with per-problem rng streams; rows are written by this
    thread in problem order, so output is identical for any worker count.
    """
    cfg = cfg or DatasetConfig()
    os.makedirs(out_dir, exist_ok=True)
    ids = list(range(cfg.num_problems))
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        problems = list(pool.map(lambda pid: generate_problem(cfg, pid), ids))

    solved = [p for p in problems if p.trace is not None]
    skipped = [p.problem_id for p in problems if p.trace is None]
    if skipped:
        logger.warning(f"Skipped {len(skipped)} problems whose expert trace failed")
    by_id = {p.problem_id: p for p in solved}
    splits = _split_problems(cfg, sorted(by_id))

    entries: Dict[str, Dict[str, Any]] = {}
    for split, problem_ids in splits.items():
        filename = f"{split}.jsonl"
        count = 0
        with open(os.path.join(out_dir, filename), "w") as f:
            for pid in problem_ids:
                for row in by_id[pid].rows:
                    f.write(json.dumps(row, sort_keys=True) + "\n")
                    count += 1
        entries[str(split)] = {"file": filename, "problems": problem_ids, "samples": count}

    traces: List[str] = []
    if cfg.emit_traces:
        for p in solved:
            name = os.path.join(TRACES_DIR, f"{p.problem_id:06d}.jsonl")
            write_trace(os.path.join(out_dir, name), p.trace)
            traces.append(name)

    rows = [row for p in solved for row in p.rows]
    counts: Dict[str, int] = {}
    for p in problems:
        counts[str(p.num_objects)] = counts.get(str(p.num_objects), 0) + 1
    manifest = DatasetManifest(
        format_version=DATASET_FORMAT_VERSION,
        num_problems=cfg.num_problems,
        seed=cfg.seed,
        noise_sigma=cfg.noise_sigma,
        object_counts=counts,
        splits=entries,
        skipped=skipped,
        negatives={
            "storage_moves": sum(
                1 for r in rows if r["kind"] == MoveKind.ToStorage and not r["augmented"]
            ),
            "perturbed": sum(1 for r in rows if r["augmented"]),
        },
        alignment_accuracy=float(np.mean([p.alignment_accuracy for p in solved] or [0.0])),
        config=cfg.to_dict(),
        traces=traces,
    )
    with open(os.path.join(out_dir, MANIFEST_FILE), "w") as f:
        json.dump(manifest.to_dict(), f, sort_keys=True, indent=2)
    logger.info(
        f"Wrote {manifest.total_samples()} samples from {len(solved)} problems to {out_dir}"
    )
    return manifest


def read_manifest(data_dir: str) -> DatasetManifest:
    path = os.path.join(data_dir, MANIFEST_FILE)
    if not os.path.exists(path):
        raise CorruptRecord(path, 0, "dataset manifest not found")
    with open(path) as f:
        return DatasetManifest.from_dict(json.load(f))


def replay_traces(data_dir: str) -> int:
    """Replay every emitted expert trace; raises CorruptRecord on the first mismatch."""
    manifest = read_manifest(data_dir)
    for name in manifest.traces:
        trace = read_trace(os.path.join(data_dir, name))
        if trace.moves:
            replay_trace(trace.moves[0].scene_before, trace)
    return len(manifest.traces)


def sample_from_row(row: Dict[str, Any], graph_cfg: Optional[GraphConfig] = None) -> TrainingSample:
    current = Scene.from_dict(row["current"])
    target = Scene.from_dict(row["target"])
    graph = build_graph(current, target, Assignment(tuple(row["perm"]), 0.0), graph_cfg)
    selected = int(row["selected"])
    y_nodes = np.zeros(graph.num_vertices)
    y_nodes[selected] = 1.0
    return TrainingSample(
        graph=graph.validate(current),
        y_nodes=y_nodes,
        selected=selected,
        delta=np.asarray(row["delta"], dtype=np.float64),
        y_goal=int(row["y_goal"]),
        goal_delta=np.asarray(row["goal_delta"], dtype=np.float64),
        augmented=bool(row["augmented"]),
        sample_id=row["sample_id"],
        problem_id=int(row["problem_id"]),
        kind=MoveKind(row["kind"]),
    )


def load_split(
    data_dir: str,
    split: Split,
    shuffle_seed: Optional[int] = None,
    graph_cfg: Optional[GraphConfig] = None,
) -> Iterator[TrainingSample]:
    """
    Stream one split. With `shuffle_seed` the row order is a permutation fixed by the
    seed; without it rows stream lazily in file order.
    """
    manifest = read_manifest(data_dir)
    entry = manifest.splits.get(str(split))
    if entry is None:
        return
    path = os.path.join(data_dir, entry["file"])

    def parse(line_no: int, line: str) -> TrainingSample:
        try:
            return sample_from_row(json.loads(line), graph_cfg)
        except (ValueError, KeyError, TypeError, NerpValidationError) as exc:
            raise CorruptRecord(path, line_no, str(exc)) from exc

    if shuffle_seed is None:
        with open(path) as f:
            for line_no, line in enumerate(f, start=1):
                yield parse(line_no, line)
        return
    with open(path) as f:
        lines = list(enumerate(f, start=1))
    for k in np.random.default_rng(shuffle_seed).permutation(len(lines)):
        yield parse(*lines[k])
