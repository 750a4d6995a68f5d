"""Command line: steering, planning, dataset pipeline, training, benchmarks.

Config files are YAML with optional sections ``system`` (constructor
overrides), ``planner`` (PlannerConfig fields), ``sst`` (SstConfig fields),
and ``cem`` (CemParams.for_system overrides).  Only two environment
variables are honored, both by the bench commands: KINOPLAN_DATA_DIR and
KINOPLAN_WORKERS.
"""

import csv
import functools
import os
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import yaml

from . import bench as bench_mod
from .data import (
    apply_split, build_samples, dataset_voxels, generate_demonstrations,
    load_dataset, load_demos, make_manifest, save_dataset, save_demos,
    split_samples, to_sample_set, verify_voxel_integrity,
)
from .environments import (
    Environment, generate_scene, load_scene, save_scene, save_voxel, voxelize,
)
from .errors import ContractViolation, SceneGenerationError
from .neuro import (
    Discriminator, Encoder, Generator, NeuralPolicy, config_hash,
    generator_loss, load_models, save_models, train_discriminator,
    train_generator,
)
from .planners import (
    PlannerConfig, SstConfig, mpnet_path_plan, mpnet_tree_plan, sst_plan,
)
from .steering import CemParams, cem_steer
from .systems import SYSTEM_NAMES, get_system

PLANNER_CHOICES = ("sst", "mp-path", "mp-tree")


def _friendly(fn):
    """Surface data-contract failures as plain CLI errors, not tracebacks."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ContractViolation, SceneGenerationError,
                FileNotFoundError) as exc:
            raise click.ClickException(str(exc)) from exc
    return wrapper


def _load_doc(path):
    if path is None:
        return {}
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def _build_system(name, doc):
    """Config ``system`` section holds overrides, plus ``name`` as fallback."""
    overrides = dict(doc.get("system") or {})
    name = name or overrides.pop("name", None)
    overrides.pop("name", None)
    if name is None:
        raise click.UsageError("no system selected; pass --system or set "
                               "system.name in the config")
    return get_system(name, **overrides)


def _parse_state(text, system, what):
    vals = np.array([float(t) for t in text.split(",")], dtype=float)
    if vals.shape != (system.state_dim,):
        raise click.UsageError(
            f"{what} needs {system.state_dim} comma-separated numbers")
    return vals


def _planner_config(doc, **cli_overrides):
    fields = dict(doc.get("planner") or {})
    fields.update({k: v for k, v in cli_overrides.items() if v is not None})
    return PlannerConfig(**fields)


def _sst_config(doc):
    return SstConfig(**(doc.get("sst") or {}))


def _cem_params(system, doc):
    return CemParams.for_system(system, **(doc.get("cem") or {}))


def _open_environment(system):
    """Obstacle-free environment with the system's default workspace."""
    base = generate_scene(system, 0)
    return Environment(base.workspace_lo, base.workspace_hi, [], seed=0)


def _write_trajectory_csv(path, system, traj):
    """Segment rows: start time, segment start state, control, duration."""
    header = ["t"] + [f"x{i}" for i in range(system.state_dim)] \
        + [f"u{i}" for i in range(system.control_dim)] + ["duration"]
    t = 0.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j in range(traj.num_steps):
            w.writerow([repr(t)] + [repr(float(v)) for v in traj.states[j]]
                       + [repr(float(v)) for v in traj.controls[j]]
                       + [repr(float(traj.durations[j]))])
            t += float(traj.durations[j])


def _echo_doc(doc):
    click.echo(yaml.safe_dump(doc, sort_keys=False).rstrip())


def _result_doc(res):
    doc = {"status": res.status, "iterations": int(res.iterations),
           "wall_time": round(float(res.wall_time), 4),
           "tree_size": int(res.tree_size)}
    if res.cost is not None:
        doc["cost"] = float(res.cost)
    if res.trajectory is not None:
        doc["segments"] = int(res.trajectory.num_steps)
        doc["terminal_state"] = [float(v)
                                 for v in res.trajectory.terminal_state]
    doc["stats"] = {k: (int(v) if isinstance(v, (int, np.integer)) else float(v))
                    for k, v in sorted(res.stats.items()) if np.isscalar(v)}
    return doc


@click.group()
def main():
    """Kinodynamic planning toolkit."""


@main.command("systems")
@click.option("--name", type=click.Choice(SYSTEM_NAMES), default=None,
              help="Dump one system's full configuration.")
def systems_cmd(name):
    """List systems, or dump one definition as YAML."""
    if name is None:
        for n in SYSTEM_NAMES:
            click.echo(n)
        return
    s = get_system(name)
    _echo_doc({
        "name": s.name,
        "state_lo": s.state_lo.tolist(),
        "state_hi": s.state_hi.tolist(),
        "control_lo": s.control_lo.tolist(),
        "control_hi": s.control_hi.tolist(),
        "angular": s.angular_mask.tolist(),
        "dt": s.dt,
        "distance_weights": s.distance_weights.tolist(),
        "goal_radius": s.goal_radius,
        "params": s.params,
    })


@main.command()
@click.option("--system", "system_name", type=click.Choice(SYSTEM_NAMES),
              required=True)
@click.option("--start", required=True, help="Comma-separated state.")
@click.option("--goal", required=True, help="Comma-separated state.")
@click.option("--scene", type=click.Path(exists=True), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--seed", type=int, default=0)
@click.option("--traj-out", type=click.Path(), default=None)
def steer(system_name, start, goal, scene, config_path, seed, traj_out):
    """Run one CEM steering problem and print the outcome."""
    doc = _load_doc(config_path)
    system = _build_system(system_name, doc)
    env = load_scene(scene) if scene else _open_environment(system)
    x0 = _parse_state(start, system, "--start")
    xg = _parse_state(goal, system, "--goal")
    res = cem_steer(system, env, x0, xg, _cem_params(system, doc),
                    np.random.default_rng(seed))
    _echo_doc({
        "terminal_distance": float(res.terminal_distance),
        "in_collision": bool(res.in_collision),
        "duration": float(res.trajectory.total_duration),
        "segments": int(res.trajectory.num_steps),
        "cem_iterations": int(res.iterations_used),
        "terminal_state": [float(v) for v in res.trajectory.terminal_state],
    })
    if traj_out:
        _write_trajectory_csv(traj_out, system, res.trajectory)


@main.command()
@click.option("--system", "system_name", type=click.Choice(SYSTEM_NAMES),
              required=True)
@click.option("--scene", type=click.Path(exists=True), default=None,
              help="Scene YAML; omitted = obstacle-free workspace.")
@click.option("--planner", type=click.Choice(PLANNER_CHOICES), default="sst")
@click.option("--generator", "generator_path", type=click.Path(exists=True),
              default=None, help="Encoder+generator checkpoint (.npz).")
@click.option("--discriminator", "discriminator_path",
              type=click.Path(exists=True), default=None)
@click.option("--start", required=True)
@click.option("--goal", required=True)
@click.option("--seed", type=int, default=None)
@click.option("--max-iterations", type=int, default=None)
@click.option("--time-budget", type=float, default=None)
@click.option("--batch-size", "-nb", type=int, default=None,
              help="Waypoint candidates per iteration (N_B).")
@click.option("--n1", type=int, default=None, help="End of the CEM phase.")
@click.option("--n2", type=int, default=None,
              help="End of the shooting phase.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--traj-out", type=click.Path(), default=None)
def plan(system_name, scene, planner, generator_path, discriminator_path,
         start, goal, seed, max_iterations, time_budget, batch_size, n1, n2,
         config_path, traj_out):
    """Plan one problem and print the result; optionally dump the path CSV."""
    doc = _load_doc(config_path)
    system = _build_system(system_name, doc)
    env = load_scene(scene) if scene else _open_environment(system)
    x0 = _parse_state(start, system, "--start")
    xg = _parse_state(goal, system, "--goal")
    cfg = _planner_config(doc, seed=seed, max_iterations=max_iterations,
                          time_budget=time_budget, batch_size=batch_size,
                          n1=n1, n2=n2)
    sst_cfg = _sst_config(doc)
    if planner == "sst":
        res = sst_plan(system, env, x0, xg, cfg, sst_cfg)
    else:
        if generator_path is None:
            raise click.UsageError(f"{planner} requires --generator")
        policy = NeuralPolicy.load(system, generator_path, discriminator_path)
        if discriminator_path is None:
            cfg = replace(cfg, use_discriminator=False)
        fn = mpnet_path_plan if planner == "mp-path" else mpnet_tree_plan
        res = fn(system, env, policy, x0, xg, cfg, sst_cfg,
                 voxel=voxelize(env))
    _echo_doc(_result_doc(res))
    if traj_out and res.trajectory is not None:
        _write_trajectory_csv(traj_out, system, res.trajectory)
    if not res.solved:
        raise SystemExit(1)


# -- dataset pipeline --------------------------------------------------------

@main.command("gen-scenes")
@click.option("--system", "system_name", type=click.Choice(SYSTEM_NAMES),
              required=True)
@click.option("--data-dir", type=click.Path(), required=True)
@click.option("--n-seen", type=int, default=10, show_default=True)
@click.option("--n-unseen", type=int, default=2, show_default=True)
@_friendly
def gen_scenes(system_name, data_dir, n_seen, n_unseen):
    """Generate scene files and voxel grids under DATA_DIR/scenes."""
    system = get_system(system_name)
    root = Path(data_dir) / "scenes"
    root.mkdir(parents=True, exist_ok=True)
    for seed in range(n_seen + n_unseen):
        env = generate_scene(system, seed)
        save_scene(env, root / f"scene_{seed}.yaml")
        save_voxel(voxelize(env), root / f"scene_{seed}.kvx")
        role = "seen" if seed < n_seen else "unseen"
        click.echo(f"scene {seed} ({role}): {len(env.obstacles)} obstacles")


@main.command("gen-demos")
@click.option("--system", "system_name", type=click.Choice(SYSTEM_NAMES),
              required=True)
@click.option("--data-dir", type=click.Path(exists=True), required=True)
@click.option("--scene-seed", "scene_seeds", type=int, multiple=True,
              required=True)
@click.option("--n-pairs", type=int, default=100, show_default=True)
@click.option("--max-iterations", type=int, default=100_000,
              show_default=True)
@click.option("--time-budget", type=float, default=60.0, show_default=True)
@click.option("--base-seed", type=int, default=0)
@click.option("--max-goal-distance", type=float, default=None,
              help="Metric cap on sampled (start, goal) separation.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@_friendly
def gen_demos(system_name, data_dir, scene_seeds, n_pairs, max_iterations,
              time_budget, base_seed, max_goal_distance, config_path):
    """Run SST on sampled pairs per scene; write DATA_DIR/demos files."""
    doc = _load_doc(config_path)
    system = _build_system(system_name, doc)
    root = Path(data_dir)
    (root / "demos").mkdir(parents=True, exist_ok=True)
    cfg = _planner_config(doc, max_iterations=max_iterations,
                          time_budget=time_budget)
    sst_cfg = _sst_config(doc)
    for scene_seed in scene_seeds:
        env = load_scene(root / "scenes" / f"scene_{scene_seed}.yaml")
        demos = generate_demonstrations(
            system, env, n_pairs, seed=base_seed + scene_seed, cfg=cfg,
            sst_cfg=sst_cfg, max_goal_distance=max_goal_distance,
            scene_seed=scene_seed)
        save_demos(root / "demos" / f"scene_{scene_seed}.yaml", demos)
        click.echo(f"scene {scene_seed}: {len(demos)}/{n_pairs} pairs solved")


@main.command("build-dataset")
@click.option("--system", "system_name", type=click.Choice(SYSTEM_NAMES),
              required=True)
@click.option("--data-dir", type=click.Path(exists=True), required=True)
@click.option("--n-seen", type=int, default=10, show_default=True)
@click.option("--n-unseen", type=int, default=2, show_default=True)
@click.option("--test-fraction", type=float, default=0.15, show_default=True)
@click.option("--seed", type=int, default=0)
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@_friendly
def build_dataset(system_name, data_dir, n_seen, n_unseen, test_fraction,
                  seed, config_path):
    """Assemble manifest + split from generated scenes and demos."""
    doc = _load_doc(config_path)
    system = _build_system(system_name, doc)
    root = Path(data_dir)
    seen = list(range(n_seen))
    unseen = list(range(n_seen, n_seen + n_unseen))
    envs, demos = {}, []
    for s in seen + unseen:
        envs[s] = load_scene(root / "scenes" / f"scene_{s}.yaml")
        demo_file = root / "demos" / f"scene_{s}.yaml"
        if demo_file.exists():
            demos.extend(load_demos(demo_file))
    manifest = make_manifest(system.name, seen, unseen, demos)
    samples = build_samples(demos, envs, manifest, seed=seed, system=system)
    train, test = split_samples(samples, demos, manifest, seed=seed,
                                test_fraction=test_fraction)
    save_dataset(root, manifest, demos, envs)
    verify_voxel_integrity(root, manifest, envs)
    click.echo(f"demonstrations: {len(demos)}")
    click.echo(f"samples: {len(samples)} (train {len(train)}, test {len(test)})")
    click.echo(f"test demonstrations: {manifest.test_demos}")


# -- training ----------------------------------------------------------------

def _parse_hidden(text):
    return tuple(int(t) for t in text.split(","))


def _write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])


@main.command("train-gen")
@click.option("--data-dir", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=100, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--batch-size", type=int, default=128, show_default=True)
@click.option("--hidden", default="512,512,512", show_default=True)
@click.option("--p-drop", type=float, default=0.2, show_default=True)
@click.option("--seed", type=int, default=0)
@click.option("--curve", "curve_path", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@_friendly
def train_gen(data_dir, out, epochs, lr, batch_size, hidden, p_drop, seed,
              curve_path, config_path):
    """Train encoder + waypoint generator; write a checkpoint."""
    doc = _load_doc(config_path)
    manifest, demos, envs = load_dataset(data_dir)
    system = get_system(manifest.system, **(doc.get("system") or {}))
    samples = build_samples(demos, envs, manifest, seed=seed, system=system)
    train, test = apply_split(samples, manifest)
    train_ss = to_sample_set(train, "generator")
    voxels = dataset_voxels(manifest, envs)
    rng = np.random.default_rng(seed)
    encoder = Encoder(rng)
    gen = Generator.for_system(rng, system, hidden=_parse_hidden(hidden),
                               p_drop=p_drop)
    curve = train_generator(encoder, gen, voxels, train_ss, epochs, rng,
                            lr=lr, batch_size=batch_size)
    train_cfg = {"epochs": epochs, "lr": lr, "batch_size": batch_size,
                 "hidden": list(_parse_hidden(hidden)), "p_drop": p_drop,
                 "seed": seed, "system": manifest.system}
    meta = {"system": manifest.system, "train_config": train_cfg,
            "config_hash": config_hash(train_cfg),
            "final_train_loss": float(curve[-1])}
    test_pos = [s for s in test if s.valid]
    if test_pos:
        meta["test_loss"] = float(generator_loss(
            encoder, gen, voxels, to_sample_set(test_pos, "generator")))
    save_models(out, {"encoder": encoder, "generator": gen}, meta)
    if curve_path:
        _write_curve(curve_path, curve)
    click.echo(f"final train loss: {curve[-1]:.6f}")
    if "test_loss" in meta:
        click.echo(f"test loss: {meta['test_loss']:.6f}")
    click.echo(f"checkpoint: {out}")


@main.command("train-disc")
@click.option("--data-dir", type=click.Path(exists=True), required=True)
@click.option("--encoder-from", "encoder_path", type=click.Path(exists=True),
              required=True, help="Generator checkpoint supplying the encoder.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=100, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--batch-size", type=int, default=128, show_default=True)
@click.option("--hidden", default="512,512,512", show_default=True)
@click.option("--p-drop", type=float, default=0.2, show_default=True)
@click.option("--seed", type=int, default=0)
@click.option("--curve", "curve_path", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@_friendly
def train_disc(data_dir, encoder_path, out, epochs, lr, batch_size, hidden,
               p_drop, seed, curve_path, config_path):
    """Train the time-to-reach discriminator against a frozen encoder."""
    doc = _load_doc(config_path)
    manifest, demos, envs = load_dataset(data_dir)
    system = get_system(manifest.system, **(doc.get("system") or {}))
    models, _ = load_models(encoder_path)
    if "encoder" not in models:
        raise click.UsageError(f"{encoder_path} holds no encoder")
    encoder = models["encoder"]
    samples = build_samples(demos, envs, manifest, seed=seed, system=system)
    train, _ = apply_split(samples, manifest)
    train_ss = to_sample_set(train, "discriminator")
    voxels = dataset_voxels(manifest, envs)
    rng = np.random.default_rng(seed)
    disc = Discriminator.for_system(rng, system,
                                    hidden=_parse_hidden(hidden),
                                    p_drop=p_drop)
    curve = train_discriminator(disc, encoder, voxels, train_ss, epochs, rng,
                                lr=lr, batch_size=batch_size)
    train_cfg = {"epochs": epochs, "lr": lr, "batch_size": batch_size,
                 "hidden": list(_parse_hidden(hidden)), "p_drop": p_drop,
                 "seed": seed, "system": manifest.system,
                 "encoder_from": str(encoder_path)}
    save_models(out, {"discriminator": disc},
                {"system": manifest.system, "train_config": train_cfg,
                 "config_hash": config_hash(train_cfg),
                 "final_train_loss": float(curve[-1])})
    if curve_path:
        _write_curve(curve_path, curve)
    click.echo(f"final train loss: {curve[-1]:.6f}")
    click.echo(f"checkpoint: {out}")


# -- benchmarks --------------------------------------------------------------

def _bench_setup(config_path):
    doc = _load_doc(config_path)
    system = _build_system(None, doc)
    data_dir = os.environ.get("KINOPLAN_DATA_DIR", doc.get("data_dir"))
    scenes = doc.get("scenes") or {}
    seen = list(scenes.get("seen", [0]))
    unseen = list(scenes.get("unseen", []))
    envs = {}
    for s in seen + unseen:
        path = Path(data_dir) / "scenes" / f"scene_{s}.yaml" if data_dir \
            else None
        envs[s] = load_scene(path) if path and path.exists() \
            else generate_scene(system, s)
    cfg = _planner_config(doc)
    workers = os.environ.get("KINOPLAN_WORKERS", doc.get("workers"))
    if workers is not None:
        cfg = replace(cfg, workers=int(workers))
    policy = None
    gen_path = doc.get("generator")
    if gen_path and data_dir:
        gen_path = Path(data_dir) / gen_path
        disc = doc.get("discriminator")
        disc_path = Path(data_dir) / disc if disc else None
        if gen_path.exists() and (disc_path is None or disc_path.exists()):
            policy = NeuralPolicy.load(system, gen_path, disc_path)
    suite = bench_mod.make_problem_suite(
        system, envs, int(doc.get("n_problems", 20)), unseen_seeds=set(unseen),
        base_seed=int(doc.get("base_seed", 0)),
        max_goal_distance=doc.get("max_goal_distance"))
    return doc, system, envs, suite, cfg, _sst_config(doc), policy


@main.group()
def bench():
    """Benchmark and ablation harness."""


@bench.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", "outdir", type=click.Path(), required=True)
@_friendly
def bench_run(config_path, outdir):
    """Run every configured planner on one deterministic suite."""
    doc, system, envs, suite, cfg, sst_cfg, policy = _bench_setup(config_path)
    fns, warns = bench_mod.make_planner_fns(
        system, policy=policy, cfg=cfg, sst_cfg=sst_cfg,
        planners=tuple(doc.get("planners", bench_mod.PLANNER_NAMES)))
    report = bench_mod.run_benchmark(system, envs, suite, fns, warns)
    files = bench_mod.export_benchmark(report, outdir)
    for w in report.warnings:
        click.echo(f"warning: {w}")
    _echo_doc({"aggregates": report.aggregates})
    click.echo("wrote: " + ", ".join(str(f) for f in files))


@bench.command("ablation")
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", "outdir", type=click.Path(), required=True)
@_friendly
def bench_ablation(config_path, outdir):
    """Paired mp-path runs with and without the discriminator."""
    doc, system, envs, suite, cfg, sst_cfg, policy = _bench_setup(config_path)
    if policy is None:
        raise click.UsageError("ablation requires generator and discriminator "
                               "checkpoints in the config")
    report = bench_mod.run_ablation(system, envs, policy, suite, cfg, sst_cfg,
                                    n_batch=int(doc.get("n_batch", 32)))
    files = bench_mod.export_ablation(report, outdir)
    _echo_doc({"summary": report.summary})
    click.echo("wrote: " + ", ".join(str(f) for f in files))


@bench.command("export")
@click.option("--rows", "rows_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", "outdir", type=click.Path(), required=True)
@_friendly
def bench_export(rows_path, outdir):
    """Recompute aggregates and quantiles from a rows.csv."""
    rows = bench_mod.load_rows(rows_path)
    if not rows:
        raise click.UsageError(f"{rows_path} holds no rows")
    report = bench_mod.BenchmarkReport(rows[0].system, rows,
                                       bench_mod.aggregate_rows(rows))
    files = bench_mod.export_benchmark(report, outdir)
    click.echo("wrote: " + ", ".join(str(f) for f in files))


if __name__ == "__main__":
    main()
