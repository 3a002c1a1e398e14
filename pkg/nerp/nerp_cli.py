import json
import os
import sys
from typing import Any, Dict, List, Optional

import click
import numpy as np
from dbt.adapters.events.logging import AdapterLogger

from nerp.__version__ import version
from nerp.configs import AblationVariant, HorizonMode, Method
from nerp.nerp_benchmark import (
    BenchmarkReport,
    make_problem,
    run_ablation,
    run_benchmark,
    run_generalization,
)
from nerp.nerp_collision import (
    generate_collision_dataset,
    read_collision_dataset,
    train_collision,
    write_collision_dataset,
)
from nerp.nerp_configs import (
    BenchmarkConfig,
    CollisionTrainConfig,
    DatasetConfig,
    EncoderConfig,
    ModelConfig,
    PlannerConfig,
    SceneConfig,
    TrainConfig,
)
from nerp.nerp_datagen import generate_dataset, replay_traces
from nerp.nerp_exceptions import InvalidConfig, NerpRuntimeError, NerpValidationError
from nerp.nerp_models import (
    COLLISION_FILE,
    ModelBundle,
    load_bundle,
    load_collision_net,
    save_collision_net,
)
from nerp.nerp_planner import plan_and_execute, write_plan
from nerp.nerp_reports import write_csv
from nerp.nerp_scene import load_scene, save_scene
from nerp.nerp_trainer import train_from_dir

logger = AdapterLogger("nerp")

EXISTING_FILE = click.Path(exists=True, dir_okay=False)

n_pts_option = click.option(
    "--n-pts", type=int, default=256, show_default=True, help="Points sampled per object cloud."
)


def _csv_list(value: str, cast=str) -> List:
    return [cast(v.strip()) for v in value.split(",") if v.strip()]


def _read_overrides(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path) as f:
            overrides = json.load(f)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise InvalidConfig(f"{path}: expected a JSON object of config fields")
    return overrides


def _finish(report: BenchmarkReport, out: str) -> None:
    report.write(out)
    failed = [name for name, ok in report.checks.items() if not ok]
    for name in failed:
        click.echo(f"check failed: {name}", err=True)
    if failed:
        sys.exit(1)


def _benchmark_config(
    scenes: int, objects: int, seeds: str, oracle: bool, n_pts: int
) -> BenchmarkConfig:
    return BenchmarkConfig(
        num_scenes=scenes,
        num_objects=objects,
        seeds=_csv_list(seeds, int),
        use_oracle_collision=oracle,
        scene=SceneConfig(n_pts=n_pts),
    )


@click.group()
@click.version_option(version, prog_name="nerp")
def cli() -> None:
    """Neural rearrangement planning: data generation, training, planning and benchmarks."""


@cli.command("gen-data")
@click.option("--problems", type=int, default=2000, show_default=True)
@click.option("--objects", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--noise", type=float, default=0.0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@n_pts_option
@click.option("--emit-traces", is_flag=True, help="Also write each expert trace under traces/.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def gen_data(
    problems: int, objects: int, seed: int, noise: float, workers: int, n_pts: int,
    emit_traces: bool, out: str,
) -> None:
    cfg = DatasetConfig(
        num_problems=problems,
        num_objects=objects,
        seed=seed,
        noise_sigma=noise,
        workers=workers,
        scene=SceneConfig(n_pts=n_pts),
        emit_traces=emit_traces,
    )
    manifest = generate_dataset(out, cfg)
    click.echo(f"{manifest.total_samples()} samples, {len(manifest.skipped)} problems skipped")


@cli.command("replay-traces")
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
def replay_traces_cmd(data: str) -> None:
    """Check that every trace written by `gen-data --emit-traces` replays exactly."""
    count = replay_traces(data)
    click.echo(f"{count} expert traces replayed")


@cli.command("gen-collision-data")
@click.option("--pairs", type=int, default=20000, show_default=True)
@click.option("--points", type=int, default=512, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@n_pts_option
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def gen_collision_data(pairs: int, points: int, seed: int, n_pts: int, out: str) -> None:
    scene_cfg = SceneConfig(n_pts=n_pts)
    records = generate_collision_dataset(pairs, np.random.default_rng(seed), scene_cfg, points)
    write_collision_dataset(out, records, {"seed": seed})
    click.echo(f"{len(records)} labelled pairs written to {out}")


@cli.command("train-collision")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--epochs", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def train_collision_cmd(data: str, epochs: int, seed: int, out: str) -> None:
    records, _ = read_collision_dataset(data)
    result = train_collision(records, CollisionTrainConfig(epochs=epochs, seed=seed))
    save_collision_net(result.net, os.path.join(out, COLLISION_FILE))
    history = os.path.join(out, "collision_history.csv")
    write_csv(result.history, ["epoch", "loss", "accuracy", "auc"], history)
    click.echo(f"held-out accuracy {result.accuracy:.4f}, AUC {result.auc:.4f}")


@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--epochs", type=int, default=10, show_default=True)
@click.option("--hidden", type=int, default=128, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--patience", type=int, default=None)
@click.option("--collision", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def train(
    data: str, epochs: int, hidden: int, seed: int, patience: Optional[int],
    collision: Optional[str], out: str,
) -> None:
    cfg = TrainConfig(
        epochs=epochs,
        seed=seed,
        patience=patience,
        checkpoint_dir=out,
        model=ModelConfig(encoder=EncoderConfig(hidden=hidden)),
    )
    bundle = ModelBundle(cfg.model, seed=seed)
    if collision:
        bundle.collision = load_collision_net(collision)
    result = train_from_dir(data, cfg, bundle)
    click.echo(f"best epoch {result.best_epoch}, checkpoint in {out}")


@cli.command()
@click.option("--scene", "scene_path", type=EXISTING_FILE, required=True)
@click.option("--target", "target_path", type=EXISTING_FILE, required=True)
@click.option("--ckpt", type=click.Path(exists=True, file_okay=False), required=True)
@click.option(
    "--config", "config_path", type=EXISTING_FILE, default=None,
    help="JSON object of planner settings; flags given on the command line win.",
)
@click.option("--rollouts", type=int, default=None, help="Rollouts per step [default: 16].")
@click.option("--seed", type=int, default=None, help="Planner seed [default: 0].")
@click.option("--constrained", is_flag=True, help="Use the |K|+1 horizon.")
@click.option("--emit-trace", is_flag=True, help="Include every rollout buffer in the plan.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def plan(
    scene_path: str, target_path: str, ckpt: str, config_path: Optional[str],
    rollouts: Optional[int], seed: Optional[int], constrained: bool, emit_trace: bool, out: str,
) -> None:
    overrides = _read_overrides(config_path)
    if rollouts is not None:
        overrides["n_rollouts"] = rollouts
    if seed is not None:
        overrides["seed"] = seed
    if constrained:
        overrides["horizon_mode"] = str(HorizonMode.Constrained)
    cfg = PlannerConfig.from_partial(overrides)
    current, target = load_scene(scene_path), load_scene(target_path)
    record = plan_and_execute(current, target, load_bundle(ckpt), cfg)
    write_plan(out, record, with_rollouts=emit_trace)
    click.echo(f"{record.status} after {record.steps} steps")


@cli.command("eval")
@click.option("--methods", default=",".join(Method), show_default=True)
@click.option("--scenes", type=int, default=100, show_default=True)
@click.option("--objects", type=int, default=5, show_default=True)
@click.option("--seeds", default="1,2,3", show_default=True)
@click.option("--ckpt", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--oracle-collision", is_flag=True)
@n_pts_option
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def eval_cmd(
    methods: str, scenes: int, objects: int, seeds: str, ckpt: Optional[str],
    oracle_collision: bool, n_pts: int, out: str,
) -> None:
    cfg = _benchmark_config(scenes, objects, seeds, oracle_collision, n_pts)
    bundle = load_bundle(ckpt) if ckpt else None
    _finish(run_benchmark(_csv_list(methods, Method), cfg, bundle), out)


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--variants", default="no_dropout,no_OS,no_GS", show_default=True)
@click.option("--scenes", type=int, default=100, show_default=True)
@click.option("--objects", type=int, default=5, show_default=True)
@click.option("--seeds", default="1,2,3", show_default=True)
@click.option("--oracle-collision", is_flag=True)
@n_pts_option
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def ablate(
    ckpt: str, variants: str, scenes: int, objects: int, seeds: str,
    oracle_collision: bool, n_pts: int, out: str,
) -> None:
    cfg = _benchmark_config(scenes, objects, seeds, oracle_collision, n_pts)
    _finish(run_ablation(load_bundle(ckpt), _csv_list(variants, AblationVariant), cfg), out)


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--counts", default="3,4,5,6,7,8", show_default=True)
@click.option("--scenes", type=int, default=100, show_default=True)
@click.option("--seeds", default="1,2,3", show_default=True)
@click.option("--oracle-collision", is_flag=True)
@n_pts_option
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def generalize(
    ckpt: str, counts: str, scenes: int, seeds: str, oracle_collision: bool, n_pts: int, out: str
) -> None:
    cfg = _benchmark_config(scenes, 5, seeds, oracle_collision, n_pts)
    report = run_generalization(load_bundle(ckpt), _csv_list(counts, int), scenes, cfg)
    _finish(report, out)


@cli.command("sample-problem")
@click.option("--objects", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@n_pts_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
def sample_problem(objects: int, seed: int, n_pts: int, out: str) -> None:
    """Write a current/target scene pair as cur.json and tgt.json."""
    cfg = BenchmarkConfig(num_objects=objects, scene=SceneConfig(n_pts=n_pts))
    current, target = make_problem(objects, np.random.default_rng(seed), cfg)
    save_scene(current, os.path.join(out, "cur.json"))
    save_scene(target, os.path.join(out, "tgt.json"))
    click.echo(json.dumps({"current": current.content_hash(), "target": target.content_hash()}))


def main() -> None:
    try:
        cli(standalone_mode=False)
    except (NerpRuntimeError, NerpValidationError) as exc:
        logger.error(str(exc))
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except click.exceptions.Abort:
        sys.exit(130)
    except click.exceptions.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
