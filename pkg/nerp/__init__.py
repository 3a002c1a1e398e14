from nerp.nerp_alignment import RearrGraph, align, build_graph, hungarian
from nerp.nerp_benchmark import BenchmarkReport, run_ablation, run_benchmark, run_generalization
from nerp.nerp_collision import CollisionNet, LearnedCollisionChecker, OracleCollisionChecker
from nerp.nerp_datagen import TrainingSample, generate_dataset, load_split
from nerp.nerp_expert import classical_heuristic_plan, classical_random_plan, expert_plan
from nerp.nerp_models import ModelBundle, load_bundle
from nerp.nerp_planner import PlanAction, plan_and_execute, plan_step
from nerp.nerp_scene import Scene, SceneObject, is_success, make_target_by_swap, sample_scene
from nerp.nerp_trainer import evaluate_heads, train_joint

__all__ = [
    "align",
    "BenchmarkReport",
    "build_graph",
    "classical_heuristic_plan",
    "classical_random_plan",
    "CollisionNet",
    "evaluate_heads",
    "expert_plan",
    "generate_dataset",
    "hungarian",
    "is_success",
    "LearnedCollisionChecker",
    "load_bundle",
    "load_split",
    "make_target_by_swap",
    "ModelBundle",
    "OracleCollisionChecker",
    "plan_and_execute",
    "plan_step",
    "PlanAction",
    "RearrGraph",
    "run_ablation",
    "run_benchmark",
    "run_generalization",
    "sample_scene",
    "Scene",
    "SceneObject",
    "train_joint",
    "TrainingSample",
]
