"""End-to-end command line coverage on a miniature car dataset.

The fixture builds everything synthetically (obstacle-free compact scenes,
propagated demonstration chains, tiny training runs) so the whole module
stays fast; one test exercises the real SST demonstration path.
"""

import csv

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from kinoplan.cli import main
from kinoplan.data import Demonstration, load_demos, save_demos
from kinoplan.environments import (
    Environment, load_scene, load_voxel, save_scene, save_voxel, voxelize,
)
from kinoplan.neuro import NeuralPolicy, load_models
from kinoplan.planners.core import Trajectory
from kinoplan.systems import SYSTEM_NAMES, get_system

COMPACT_BOUNDS = {"state_lo": [-10.0, -10.0, -float(np.pi)],
                  "state_hi": [10.0, 10.0, float(np.pi)]}


def compact_car():
    return get_system("car", **COMPACT_BOUNDS)


def write_yaml(path, doc):
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh)
    return str(path)


def make_chain(system, rng, scene_seed, n_steps):
    x0 = rng.uniform([-6.0, -6.0, -1.0], [6.0, 6.0, 1.0])
    states, controls, durations = [x0], [], []
    for _ in range(n_steps):
        u = rng.uniform(system.control_lo, system.control_hi)
        tau = float(rng.uniform(0.3, 0.8))
        states.append(system.propagate(states[-1], u, tau))
        controls.append(u)
        durations.append(tau)
    traj = Trajectory(np.array(states[:-1]), np.array(controls),
                      np.array(durations), states[-1])
    return Demonstration("car", scene_seed, x0, states[-1], traj)


def invoke(*args, env=None):
    return CliRunner().invoke(main, [str(a) for a in args], env=env,
                              catch_exceptions=False)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Scenes + demos + dataset + trained checkpoints, all miniature."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    (data / "scenes").mkdir(parents=True)
    (data / "demos").mkdir()
    system = compact_car()
    lo, hi = np.array([-10.0, -10.0]), np.array([10.0, 10.0])
    for seed in range(4):
        env = Environment(lo, hi, [], seed=seed)
        save_scene(env, data / "scenes" / f"scene_{seed}.yaml")
        save_voxel(voxelize(env), data / "scenes" / f"scene_{seed}.kvx")
    rng = np.random.default_rng(7)
    for seed in range(3):
        demos = [make_chain(system, rng, seed, 2 + k % 3) for k in range(5)]
        save_demos(data / "demos" / f"scene_{seed}.yaml", demos)
    cfg = write_yaml(root / "compact.yaml", {"system": dict(COMPACT_BOUNDS)})

    res = invoke("build-dataset", "--system", "car", "--data-dir", data,
                 "--n-seen", 3, "--n-unseen", 1, "--config", cfg)
    assert res.exit_code == 0, res.output
    res = invoke("train-gen", "--data-dir", data, "--out", data / "gen.npz",
                 "--epochs", 3, "--hidden", "32,32", "--batch-size", 64,
                 "--seed", 0, "--curve", data / "gen_curve.csv",
                 "--config", cfg)
    assert res.exit_code == 0, res.output
    res = invoke("train-disc", "--data-dir", data,
                 "--encoder-from", data / "gen.npz",
                 "--out", data / "disc.npz", "--epochs", 3,
                 "--hidden", "32,32", "--batch-size", 64, "--seed", 1,
                 "--curve", data / "disc_curve.csv", "--config", cfg)
    assert res.exit_code == 0, res.output
    return {"root": root, "data": data, "config": cfg,
            "build_output": None}


def test_systems_list():
    res = invoke("systems")
    assert res.exit_code == 0
    assert tuple(res.output.split()) == tuple(SYSTEM_NAMES)


def test_systems_dump_matches_registry():
    res = invoke("systems", "--name", "double_integrator")
    assert res.exit_code == 0
    doc = yaml.safe_load(res.output)
    s = get_system("double_integrator")
    assert doc["dt"] == s.dt
    assert doc["goal_radius"] == s.goal_radius
    assert doc["state_hi"] == s.state_hi.tolist()
    assert doc["angular"] == [False, False]


def test_steer_reports_and_writes_csv(tmp_path):
    out = tmp_path / "steer.csv"
    res = invoke("steer", "--system", "double_integrator",
                 "--start", "-0.5,0", "--goal", "0.5,0", "--seed", 3,
                 "--traj-out", out)
    assert res.exit_code == 0, res.output
    doc = yaml.safe_load(res.output)
    assert {"terminal_distance", "in_collision", "duration",
            "segments"} <= doc.keys()
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x0", "x1", "u0", "duration"]
    assert len(rows) - 1 == doc["segments"]
    # the time column accumulates the preceding durations
    t = 0.0
    for row in rows[1:]:
        assert float(row[0]) == pytest.approx(t, abs=1e-12)
        t += float(row[-1])
    assert t == pytest.approx(doc["duration"])


def test_steer_rejects_wrong_dimension():
    res = invoke("steer", "--system", "double_integrator",
                 "--start", "1,2,3", "--goal", "0,0")
    assert res.exit_code != 0
    assert "2 comma-separated numbers" in res.output


def test_plan_sst_solves_short_problem(workdir, tmp_path):
    out = tmp_path / "traj.csv"
    res = invoke("plan", "--system", "car", "--planner", "sst",
                 "--start", "0,0,0", "--goal", "3,0,0", "--seed", 4,
                 "--max-iterations", 6000, "--time-budget", 5.0,
                 "--config", workdir["config"], "--traj-out", out)
    assert res.exit_code == 0, res.output
    doc = yaml.safe_load(res.output)
    assert doc["status"] == "solved"
    assert doc["cost"] > 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x0", "x1", "x2", "u0", "u1", "duration"]
    assert len(rows) - 1 == doc["segments"]


def test_plan_neural_requires_generator():
    res = invoke("plan", "--system", "car", "--planner", "mp-path",
                 "--start", "0,0,0", "--goal", "1,0,0")
    assert res.exit_code == 2
    assert "requires --generator" in res.output


def test_plan_neural_runs_with_checkpoints(workdir):
    data = workdir["data"]
    res = invoke("plan", "--system", "car", "--planner", "mp-path",
                 "--generator", data / "gen.npz",
                 "--discriminator", data / "disc.npz",
                 "--start", "0,0,0", "--goal", "3,0,0", "--seed", 4,
                 "--max-iterations", 40, "--time-budget", 2.0,
                 "--config", workdir["config"])
    doc = yaml.safe_load(res.output)
    assert doc["status"] in ("solved", "timeout", "failed")
    assert doc["stats"]["gen_calls"] > 0
    assert doc["stats"]["disc_calls"] > 0
    assert res.exit_code == (0 if doc["status"] == "solved" else 1)


def test_gen_scenes_writes_files(tmp_path):
    res = invoke("gen-scenes", "--system", "car", "--data-dir", tmp_path,
                 "--n-seen", 2, "--n-unseen", 1)
    assert res.exit_code == 0, res.output
    scenes = tmp_path / "scenes"
    for seed in range(3):
        env = load_scene(scenes / f"scene_{seed}.yaml")
        grid = load_voxel(scenes / f"scene_{seed}.kvx")
        assert grid == voxelize(env)
    assert res.output.count("seen") == 3 and res.output.count("unseen") == 1


def test_gen_demos_runs_sst(tmp_path):
    (tmp_path / "scenes").mkdir()
    env = Environment(np.array([-10.0, -10.0]), np.array([10.0, 10.0]), [])
    save_scene(env, tmp_path / "scenes" / "scene_0.yaml")
    cfg = write_yaml(tmp_path / "compact.yaml",
                     {"system": dict(COMPACT_BOUNDS)})
    res = invoke("gen-demos", "--system", "car", "--data-dir", tmp_path,
                 "--scene-seed", 0, "--n-pairs", 2, "--max-iterations", 8000,
                 "--time-budget", 5.0, "--base-seed", 11,
                 "--max-goal-distance", 5.0, "--config", cfg)
    assert res.exit_code == 0, res.output
    assert "pairs solved" in res.output
    demos = load_demos(tmp_path / "demos" / "scene_0.yaml")
    for d in demos:
        assert d.scene_seed == 0
        assert d.trajectory.num_steps > 0


def test_build_dataset_artifacts(workdir):
    data = workdir["data"]
    with open(data / "manifest.yaml") as fh:
        doc = yaml.safe_load(fh)
    assert doc["system"] == "car"
    assert doc["seen_seeds"] == [0, 1, 2]
    assert doc["unseen_seeds"] == [3]
    assert doc["version"] == 1
    assert len(doc["test_demos"]) > 0
    assert sum(doc["demo_counts"].values()) == 15


def test_trained_checkpoints_load_as_policy(workdir):
    data = workdir["data"]
    models, meta = load_models(data / "gen.npz")
    assert set(models) == {"encoder", "generator"}
    assert meta["system"] == "car"
    assert "config_hash" in meta and "final_train_loss" in meta
    assert "test_loss" in meta
    models, meta = load_models(data / "disc.npz")
    assert set(models) == {"discriminator"}
    policy = NeuralPolicy.load(compact_car(), data / "gen.npz",
                               data / "disc.npz")
    env = Environment(np.array([-10.0, -10.0]), np.array([10.0, 10.0]), [])
    z = policy.encode(voxelize(env))
    x = policy.generate(z, np.zeros(3), np.array([3.0, 0.0, 0.0]),
                        np.random.default_rng(0))
    assert x.shape == (1, 3)
    with open(data / "gen_curve.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "loss"]
    assert len(rows) - 1 == 3
    losses = [float(r[1]) for r in rows[1:]]
    assert losses[-1] <= losses[0]


def test_bench_run_export_roundtrip(workdir, tmp_path):
    bench_cfg = write_yaml(tmp_path / "bench.yaml", {
        "system": {"name": "car", **COMPACT_BOUNDS},
        "data_dir": str(workdir["data"]),
        "scenes": {"seen": [0, 1], "unseen": [3]},
        "planners": ["sst"],
        "n_problems": 2,
        "base_seed": 11,
        "max_goal_distance": 4.0,
        "planner": {"max_iterations": 2500, "time_budget": 5.0},
    })
    res = invoke("bench", "run", "--config", bench_cfg,
                 "--out", tmp_path / "out")
    assert res.exit_code == 0, res.output
    with open(tmp_path / "out" / "rows.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == 2
    assert rows[1][0] == "sst"
    res = invoke("bench", "export", "--rows", tmp_path / "out" / "rows.csv",
                 "--out", tmp_path / "out2")
    assert res.exit_code == 0, res.output
    first = (tmp_path / "out" / "aggregates.json").read_text()
    second = (tmp_path / "out2" / "aggregates.json").read_text()
    assert yaml.safe_load(first)["aggregates"] == \
        yaml.safe_load(second)["aggregates"]


def test_bench_data_dir_env_override(workdir, tmp_path):
    bench_cfg = write_yaml(tmp_path / "bench.yaml", {
        "system": {"name": "car", **COMPACT_BOUNDS},
        "data_dir": str(tmp_path / "nowhere"),
        "scenes": {"seen": [0]},
        "planners": ["sst"],
        "n_problems": 1,
        "base_seed": 11,
        "max_goal_distance": 4.0,
        "planner": {"max_iterations": 2500, "time_budget": 5.0},
    })
    res = invoke("bench", "run", "--config", bench_cfg,
                 "--out", tmp_path / "out",
                 env={"KINOPLAN_DATA_DIR": str(workdir["data"])})
    assert res.exit_code == 0, res.output


def test_bench_ablation_requires_checkpoints(workdir, tmp_path):
    bench_cfg = write_yaml(tmp_path / "bench.yaml", {
        "system": {"name": "car", **COMPACT_BOUNDS},
        "scenes": {"seen": [0]},
        "n_problems": 1,
    })
    res = invoke("bench", "ablation", "--config", bench_cfg,
                 "--out", tmp_path / "out")
    assert res.exit_code == 2
    assert "requires generator" in res.output


def test_bench_ablation_cli(workdir, tmp_path):
    bench_cfg = write_yaml(tmp_path / "bench.yaml", {
        "system": {"name": "car", **COMPACT_BOUNDS},
        "data_dir": str(workdir["data"]),
        "scenes": {"seen": [0]},
        "n_problems": 1,
        "base_seed": 11,
        "n_batch": 4,
        "max_goal_distance": 4.0,
        "planner": {"max_iterations": 300, "time_budget": 2.0},
        "generator": "gen.npz",
        "discriminator": "disc.npz",
    })
    res = invoke("bench", "ablation", "--config", bench_cfg,
                 "--out", tmp_path / "out")
    assert res.exit_code == 0, res.output
    doc = yaml.safe_load(res.output.split("wrote:")[0])
    assert doc["summary"]["n_problems"] == 1
    assert (tmp_path / "out" / "ablation_rows.csv").exists()
