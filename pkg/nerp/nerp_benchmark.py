import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dbt.adapters.events.logging import AdapterLogger
from scipy.stats import spearmanr

from nerp.configs import AblationVariant, Method
from nerp.nerp_collision import CollisionChecker, LearnedCollisionChecker, OracleCollisionChecker
from nerp.nerp_configs import BenchmarkConfig, FeatureOracleConfig
from nerp.nerp_exceptions import MissingCheckpoint, TargetInfeasible
from nerp.nerp_expert import classical_heuristic_plan, classical_random_plan, expert_plan
from nerp.nerp_models import ModelBundle
from nerp.nerp_planner import plan_and_execute
from nerp.nerp_reports import write_csv, write_json
from nerp.nerp_scene import Scene, make_target_by_swap, sample_scene, sample_table_position

logger = AdapterLogger("nerp")

# evaluation streams are keyed on this salt, keeping them apart from datagen's (seed, problem)
EVAL_SALT = 7919
PROBLEM_RETRIES = 10
METHOD_ORDER = [Method.Nerp, Method.Expert, Method.ClassicalHeuristic, Method.ClassicalRandom]
ROW_COLUMNS = [
    "seed",
    "scene",
    "method",
    "variant",
    "num_objects",
    "status",
    "success",
    "steps",
    "final_error",
    "collisions",
]
STD_CONVENTION = (
    "success_rate std is taken across seeds; steps and final_error mean/std are taken over "
    "successful episodes only"
)


@dataclass
class EpisodeRow:
    seed: int
    scene: int
    method: str
    variant: str
    num_objects: int
    status: str
    success: bool
    steps: int
    final_error: float
    collisions: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class MethodSummary:
    method: str
    variant: str
    num_objects: int
    episodes: int
    success_rate: float
    success_rate_std: float
    steps_mean: float
    steps_std: float
    error_mean: float
    error_std: float


@dataclass
class BenchmarkReport:
    rows: List[EpisodeRow] = field(default_factory=list)
    summaries: List[MethodSummary] = field(default_factory=list)
    checks: Dict[str, bool] = field(default_factory=dict)
    stats: Dict[str, float] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)

    def summary(
        self, method: Method, variant: str = AblationVariant.Full, num_objects: Optional[int] = None
    ) -> Optional[MethodSummary]:
        for s in self.summaries:
            if s.method == method and s.variant == variant:
                if num_objects is None or s.num_objects == num_objects:
                    return s
        return None

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "convention": STD_CONVENTION,
            "summaries": [dataclasses.asdict(s) for s in self.summaries],
            "checks": self.checks,
            "stats": self.stats,
            "config": self.config,
        }

    def write(self, csv_path: str) -> None:
        """Episode rows as CSV; summaries, checks and config as JSON next to it."""
        write_csv([r.to_dict() for r in self.rows], ROW_COLUMNS, csv_path)
        write_json(self.to_dict(), os.path.splitext(csv_path)[0] + ".json")
        logger.info(f"Wrote {len(self.rows)} episode rows to {csv_path}")


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    if len(values) == 0:
        return float("nan"), float("nan")
    return float(np.mean(values)), float(np.std(values))


def summarize(rows: Sequence[EpisodeRow]) -> List[MethodSummary]:
    """Pure fold over episode rows, grouped by (method, variant, object count)."""
    groups: Dict[Tuple[str, str, int], List[EpisodeRow]] = {}
    for row in rows:
        groups.setdefault((row.method, row.variant, row.num_objects), []).append(row)
    summaries = []
    for (method, variant, num_objects), group in sorted(groups.items()):
        seeds = sorted({r.seed for r in group})
        per_seed = [100.0 * np.mean([r.success for r in group if r.seed == s]) for s in seeds]
        wins = [r for r in group if r.success]
        rate, rate_std = _mean_std(per_seed)
        steps, steps_std = _mean_std([r.steps for r in wins])
        error, error_std = _mean_std([r.final_error for r in wins])
        summaries.append(
            MethodSummary(
                method, variant, num_objects, len(group), rate, rate_std,
                steps, steps_std, error, error_std,
            )
        )
    return summaries


def make_problem(
    num_objects: int, rng: np.random.Generator, cfg: BenchmarkConfig
) -> Tuple[Scene, Scene]:
    """A swap problem; a single object is sent to a fresh random spot instead."""
    for _ in range(PROBLEM_RETRIES):
        scene = sample_scene(num_objects, rng=rng, cfg=cfg.scene)
        if num_objects == 1:
            obj = scene.objects[0]
            spot = sample_table_position(obj.shape, scene.table, rng)
            return scene, scene.with_object(obj.placed_at(spot))
        try:
            return scene, make_target_by_swap(scene, rng, cfg.scene.margin)
        except TargetInfeasible:
            continue
    raise TargetInfeasible(f"No {num_objects}-object problem after {PROBLEM_RETRIES} scenes")


def _checker(bundle: Optional[ModelBundle], cfg: BenchmarkConfig) -> CollisionChecker:
    if cfg.use_oracle_collision:
        return OracleCollisionChecker(cfg.scene.margin)
    if bundle is None or bundle.collision is None:
        raise MissingCheckpoint("A trained collision network is required for this method")
    return LearnedCollisionChecker(bundle.collision)


def run_episode(
    method: Method,
    current: Scene,
    target: Scene,
    rng: np.random.Generator,
    cfg: BenchmarkConfig,
    bundle: Optional[ModelBundle] = None,
) -> Tuple[str, bool, int, float, int]:
    """(status, success, steps, final error, executed collisions) of one episode."""
    features = FeatureOracleConfig(
        dim=cfg.scene.feature_dim, noise_sigma=cfg.noise_sigma, seed=int(rng.integers(2**31 - 1))
    )
    if method == Method.Expert:
        trace = expert_plan(current, target, rng=rng, cfg=cfg.expert, margin=cfg.scene.margin)
    elif method == Method.ClassicalHeuristic:
        trace = classical_heuristic_plan(
            current, target, _checker(bundle, cfg), rng=rng, cfg=cfg.expert, features=features
        )
    elif method == Method.ClassicalRandom:
        trace = classical_random_plan(
            current,
            target,
            _checker(bundle, cfg),
            n_rollouts=cfg.random_rollouts,
            horizon=cfg.planner.horizon(len(current)),
            rng=rng,
            cfg=cfg.expert,
            features=features,
        )
    else:
        if bundle is None:
            raise MissingCheckpoint("NeRP episodes need a trained model bundle")
        record = plan_and_execute(
            current, target, bundle, cfg.planner, rng, _checker(bundle, cfg), features,
            cfg.scene.margin,
        )
        return (
            str(record.status), record.success, record.steps, record.final_error,
            record.collisions,
        )
    return str(trace.status), trace.success, trace.steps, trace.final_error, 0


def _episodes(
    methods: Sequence[Method],
    cfg: BenchmarkConfig,
    bundle: Optional[ModelBundle],
    seed: int,
    scene_index: int,
) -> List[EpisodeRow]:
    problem_rng = np.random.default_rng([EVAL_SALT, seed, cfg.num_objects, scene_index])
    current, target = make_problem(cfg.num_objects, problem_rng, cfg)
    rows = []
    for method in methods:
        code = METHOD_ORDER.index(method)
        rng = np.random.default_rng([EVAL_SALT, seed, cfg.num_objects, scene_index, code])
        status, success, steps, error, collisions = run_episode(
            method, current, target, rng, cfg, bundle
        )
        rows.append(
            EpisodeRow(
                seed, scene_index, str(method), str(cfg.planner.variant), cfg.num_objects,
                status, success, steps, error, collisions,
            )
        )
    return rows


def collect_rows(
    methods: Sequence[Method], cfg: BenchmarkConfig, bundle: Optional[ModelBundle] = None
) -> List[EpisodeRow]:
    jobs = [(seed, k) for seed in cfg.seeds for k in range(cfg.num_scenes)]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        batches = pool.map(lambda job: _episodes(methods, cfg, bundle, *job), jobs)
        return [row for batch in batches for row in batch]


def _above(a: Optional[MethodSummary], b: Optional[MethodSummary], attr: str) -> bool:
    if a is None or b is None:
        return False
    return bool(getattr(a, attr) > getattr(b, attr))


def benchmark_checks(report: BenchmarkReport) -> Dict[str, bool]:
    checks: Dict[str, bool] = {}
    nerp = report.summary(Method.Nerp)
    expert = report.summary(Method.Expert)
    random = report.summary(Method.ClassicalRandom)
    expert_wins = [r for r in report.rows if r.method == Method.Expert and r.success]
    if expert_wins:
        checks["expert_error_exactly_zero"] = all(r.final_error == 0.0 for r in expert_wins)
    if expert is not None and random is not None:
        checks["random_steps_above_expert"] = _above(random, expert, "steps_mean")
    if nerp is not None and random is not None:
        checks["nerp_success_above_random"] = _above(nerp, random, "success_rate")
        checks["nerp_steps_below_random"] = _above(random, nerp, "steps_mean")
    return checks


def ablation_checks(
    report: BenchmarkReport, variants: Sequence[AblationVariant]
) -> Dict[str, bool]:
    """The full planner must succeed strictly more often than each ablated variant."""
    full = report.summary(Method.Nerp, AblationVariant.Full)
    return {
        f"full_success_above_{variant}": _above(
            full, report.summary(Method.Nerp, variant), "success_rate"
        )
        for variant in variants
    }


def run_benchmark(
    methods: Sequence[Method],
    cfg: Optional[BenchmarkConfig] = None,
    bundle: Optional[ModelBundle] = None,
) -> BenchmarkReport:
    cfg = cfg or BenchmarkConfig()
    if Method.Nerp in methods and bundle is None:
        raise MissingCheckpoint("run_benchmark: the nerp method needs a trained bundle")
    rows = collect_rows(methods, cfg, bundle)
    report = BenchmarkReport(rows=rows, summaries=summarize(rows), config=cfg.to_dict())
    report.checks = benchmark_checks(report)
    for s in report.summaries:
        logger.info(
            f"{s.method}: success {s.success_rate:.2f} +- {s.success_rate_std:.2f} %, "
            f"steps {s.steps_mean:.2f} +- {s.steps_std:.2f}"
        )
    return report


def run_generalization(
    bundle: ModelBundle,
    object_counts: Sequence[int] = (3, 4, 5, 6, 7, 8),
    scenes_per_count: int = 100,
    cfg: Optional[BenchmarkConfig] = None,
) -> BenchmarkReport:
    """NeRP on object counts it was not trained on; planning steps should grow with the count."""
    cfg = cfg or BenchmarkConfig()
    rows: List[EpisodeRow] = []
    for count in object_counts:
        sub = dataclasses.replace(cfg, num_objects=count, num_scenes=scenes_per_count)
        rows += collect_rows([Method.Nerp], sub, bundle)
    report = BenchmarkReport(rows=rows, summaries=summarize(rows), config=cfg.to_dict())
    means = [(s.num_objects, s.steps_mean) for s in report.summaries if np.isfinite(s.steps_mean)]
    if len(means) >= 2:
        rho = float(spearmanr([c for c, _ in means], [m for _, m in means]).correlation)
        report.stats["steps_spearman_rho"] = rho
        report.checks["steps_increase_with_objects"] = rho > 0.9
    return report


def run_ablation(
    bundle: ModelBundle,
    variants: Sequence[AblationVariant] = tuple(AblationVariant),
    cfg: Optional[BenchmarkConfig] = None,
) -> BenchmarkReport:
    """One NeRP benchmark per planner variant, on the same scenes and rng streams."""
    cfg = cfg or BenchmarkConfig()
    variants = list(dict.fromkeys([AblationVariant.Full, *variants]))
    rows: List[EpisodeRow] = []
    for variant in variants:
        planner = dataclasses.replace(cfg.planner, variant=variant)
        rows += collect_rows([Method.Nerp], dataclasses.replace(cfg, planner=planner), bundle)
    report = BenchmarkReport(rows=rows, summaries=summarize(rows), config=cfg.to_dict())
    report.checks = ablation_checks(report, variants[1:])
    return report
