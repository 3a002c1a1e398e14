import json
import os
import sys

import pytest
from click.testing import CliRunner

from nerp.__version__ import version
from nerp.nerp_cli import cli, main
from nerp.nerp_collision import CollisionNet
from nerp.nerp_datagen import read_manifest
from nerp.nerp_models import ModelBundle
from nerp.nerp_reports import read_csv
from nerp.nerp_scene import load_scene


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


def test_version(runner) -> None:
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert version in result.output


def test_sample_problem_writes_both_scenes(runner, tmp_path) -> None:
    out = str(tmp_path / "problem")
    result = runner.invoke(cli, ["sample-problem", "--objects", "3", "--seed", "4", "--out", out])
    assert result.exit_code == 0, result.output
    current = load_scene(os.path.join(out, "cur.json"))
    target = load_scene(os.path.join(out, "tgt.json"))
    assert len(current) == len(target) == 3
    hashes = json.loads(result.output.strip().splitlines()[-1])
    assert hashes == {"current": current.content_hash(), "target": target.content_hash()}


def test_gen_data(runner, tmp_path) -> None:
    out = str(tmp_path / "data")
    args = ["gen-data", "--problems", "3", "--objects", "3", "--seed", "1", "--n-pts", "32"]
    result = runner.invoke(cli, args + ["--out", out])
    assert result.exit_code == 0, result.output
    manifest = read_manifest(out)
    assert manifest.num_problems == 3
    assert manifest.config["scene"]["n_pts"] == 32


def test_gen_data_emits_traces_that_replay(runner, tmp_path) -> None:
    out = str(tmp_path / "data")
    args = ["gen-data", "--problems", "2", "--objects", "3", "--n-pts", "32", "--emit-traces"]
    result = runner.invoke(cli, args + ["--out", out])
    assert result.exit_code == 0, result.output
    traces = read_manifest(out).traces
    assert traces and all(os.path.exists(os.path.join(out, name)) for name in traces)
    result = runner.invoke(cli, ["replay-traces", "--data", out])
    assert result.exit_code == 0, result.output
    assert f"{len(traces)} expert traces replayed" in result.output


def test_gen_collision_data(runner, tmp_path) -> None:
    out = str(tmp_path / "pairs.bin")
    args = ["gen-collision-data", "--pairs", "4", "--points", "32", "--out", out]
    result = runner.invoke(cli, args)
    assert result.exit_code == 0, result.output
    assert os.path.exists(out) and os.path.exists(out + ".json")


def test_eval_with_the_expert(runner, tmp_path) -> None:
    out = str(tmp_path / "eval.csv")
    result = runner.invoke(
        cli,
        [
            "eval", "--methods", "expert", "--scenes", "2", "--objects", "3",
            "--seeds", "1", "--oracle-collision", "--out", out,
        ],
    )
    assert result.exit_code == 0, result.output
    rows = read_csv(out)
    assert len(rows) == 2
    assert all(row["method"] == "expert" for row in rows)


@pytest.fixture
def plan_inputs(runner, tmp_path, small_model_cfg, tiny_sa_cfg):
    problem, ckpt = str(tmp_path / "problem"), str(tmp_path / "ckpt")
    runner.invoke(cli, ["sample-problem", "--objects", "2", "--n-pts", "32", "--out", problem])
    bundle = ModelBundle(small_model_cfg, collision=CollisionNet(tiny_sa_cfg), trained=True)
    bundle.save(ckpt)
    return [
        "plan", "--scene", os.path.join(problem, "cur.json"),
        "--target", os.path.join(problem, "tgt.json"), "--ckpt", ckpt,
    ]


def test_plan_writes_an_episode(runner, tmp_path, plan_inputs) -> None:
    out = str(tmp_path / "plan.json")
    args = plan_inputs + ["--rollouts", "2", "--constrained", "--out", out]
    result = runner.invoke(cli, args)
    assert result.exit_code == 0, result.output
    with open(out) as f:
        payload = json.load(f)
    assert payload["initial_horizon"] == 3
    assert payload["steps"] + payload["horizon_left"] == 3


def test_plan_reads_a_config_file(runner, tmp_path, plan_inputs) -> None:
    config, out = tmp_path / "planner.json", str(tmp_path / "plan.json")
    config.write_text(json.dumps({"horizon_mode": "constrained", "n_rollouts": 3}))
    args = plan_inputs + ["--config", str(config), "--rollouts", "2", "--emit-trace"]
    result = runner.invoke(cli, args + ["--out", out])
    assert result.exit_code == 0, result.output
    with open(out) as f:
        payload = json.load(f)
    assert payload["initial_horizon"] == 3
    # the command-line flag beats the file
    assert all(len(a["rollouts"]) == 2 for a in payload["actions"])


@pytest.mark.parametrize(
    "content", ['{"n_rollout": 2}', "[1, 2]", "{not json"], ids=["unknown", "list", "garbled"]
)
def test_plan_rejects_a_bad_config_file(
    monkeypatch, tmp_path, plan_inputs, content: str
) -> None:
    config = tmp_path / "planner.json"
    config.write_text(content)
    argv = ["nerp"] + plan_inputs + ["--config", str(config), "--out", str(tmp_path / "p.json")]
    monkeypatch.setattr(sys, "argv", argv)
    with pytest.raises(SystemExit) as exc:
        main()
    assert exc.value.code == 2


def test_main_maps_errors_to_exit_codes(monkeypatch, tmp_path) -> None:
    out = str(tmp_path / "eval.csv")
    monkeypatch.setattr(sys, "argv", ["nerp", "eval", "--methods", "nerp", "--out", out])
    with pytest.raises(SystemExit) as exc:
        main()
    assert exc.value.code == 2

    monkeypatch.setattr(sys, "argv", ["nerp", "eval", "--scenes", "not-a-number"])
    with pytest.raises(SystemExit) as exc:
        main()
    assert exc.value.code == 2
