"""Benchmark harness: one suite, many planners, paired ablation, exports.

Every planner in a run sees the same ProblemCase objects, each problem
carries its own seed (base_seed + index), and per-problem wall time comes
from the planner itself, so scene voxelization and checkpoint loading stay
outside the measurement while latent encoding stays inside.
"""

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from .data import sample_problem_pair
from .environments import voxelize
from .errors import ContractViolation
from .planners import (
    PlannerConfig, SstConfig, mpnet_path_plan, mpnet_tree_plan, sst_plan,
)

log = logging.getLogger(__name__)

PLANNER_NAMES = ("sst", "mp-path", "mp-tree")
ROW_FIELDS = ("planner", "system", "problem", "scene_seed", "scene_class",
              "seed", "status", "wall_time", "cost", "iterations", "tree_size")


@dataclass
class ProblemCase:
    index: int
    scene_seed: int
    scene_class: str                 # seen | unseen
    x_init: np.ndarray
    x_goal: np.ndarray
    seed: int


@dataclass
class ProblemRow:
    planner: str
    system: str
    problem: int
    scene_seed: int
    scene_class: str
    seed: int
    status: str
    wall_time: float
    cost: float | None
    iterations: int
    tree_size: int

    @property
    def solved(self) -> bool:
        return self.status == "solved"

    def outcome(self):
        """Everything except wall time, for determinism comparisons."""
        return (self.planner, self.problem, self.status, self.cost,
                self.iterations, self.tree_size)


@dataclass
class BenchmarkReport:
    system: str
    rows: list
    aggregates: dict
    warnings: list = field(default_factory=list)

    def validate(self):
        """Recompute aggregates from rows; mismatch beyond 1e-9 is an error."""
        fresh = aggregate_rows(self.rows)
        if set(fresh) != set(self.aggregates):
            raise ContractViolation("aggregate cells do not match rows")
        for key, cell in fresh.items():
            stored = self.aggregates[key]
            if set(cell) != set(stored):
                raise ContractViolation(f"{key}: aggregate fields differ")
            for k, v in cell.items():
                if isinstance(v, float) and abs(v - stored[k]) > 1e-9:
                    raise ContractViolation(f"{key}.{k}: {stored[k]} vs {v}")
                if not isinstance(v, float) and v != stored[k]:
                    raise ContractViolation(f"{key}.{k}: {stored[k]} vs {v}")

    def outcomes(self):
        return [r.outcome() for r in self.rows]


def make_problem_suite(system, envs: dict, n_problems: int,
                       unseen_seeds=(), base_seed: int = 0,
                       max_goal_distance=None):
    """Deterministic problem list: scene round-robin, seed ladder.

    Problem k plans with seed base_seed + k and samples its (start, goal)
    pair from that same seed, so extending the suite never changes earlier
    problems.
    """
    if n_problems < 1:
        raise ContractViolation("n_problems must be >= 1")
    order = sorted(envs)
    cases = []
    for k in range(n_problems):
        scene_seed = order[k % len(order)]
        rng = np.random.default_rng(base_seed + k)
        x0, goal = sample_problem_pair(system, envs[scene_seed], rng,
                                       max_goal_distance)
        cls = "unseen" if scene_seed in unseen_seeds else "seen"
        cases.append(ProblemCase(k, scene_seed, cls, x0, goal, base_seed + k))
    return cases


def make_planner_fns(system, policy=None, cfg: PlannerConfig | None = None,
                     sst_cfg: SstConfig | None = None,
                     planners=PLANNER_NAMES):
    """Planner name -> fn(env, voxel, case) -> PlanResult, plus warnings.

    Neural planners are skipped with a recorded warning when no policy is
    available (missing checkpoints).
    """
    cfg = cfg if cfg is not None else PlannerConfig()
    sst_cfg = sst_cfg if sst_cfg is not None else SstConfig()
    fns, warnings = {}, []

    def seeded(case):
        return replace(cfg, seed=case.seed)

    for name in planners:
        if name == "sst":
            fns[name] = lambda env, voxel, case: sst_plan(
                system, env, case.x_init, case.x_goal, seeded(case), sst_cfg)
        elif name in ("mp-path", "mp-tree"):
            if policy is None:
                msg = f"{name}: no policy/checkpoint available, skipped"
                warnings.append(msg)
                log.warning(msg)
                continue
            plan = mpnet_path_plan if name == "mp-path" else mpnet_tree_plan
            fns[name] = (lambda p: lambda env, voxel, case: p(
                system, env, policy, case.x_init, case.x_goal, seeded(case),
                sst_cfg, voxel=voxel))(plan)
        else:
            raise ContractViolation(f"unknown planner {name!r}")
    return fns, warnings


def run_benchmark(system, envs: dict, suite, planner_fns: dict,
                  warnings=()) -> BenchmarkReport:
    """Run every planner on every problem; voxelization happens up front."""
    if not planner_fns:
        raise ContractViolation("no planners to run")
    voxels = {seed: voxelize(env) for seed, env in envs.items()}
    rows = []
    for case in suite:
        env = envs[case.scene_seed]
        for name, fn in planner_fns.items():
            res = fn(env, voxels[case.scene_seed], case)
            rows.append(ProblemRow(
                name, system.name, case.index, case.scene_seed,
                case.scene_class, case.seed, res.status, res.wall_time,
                res.cost, res.iterations, res.tree_size))
    report = BenchmarkReport(system.name, rows, aggregate_rows(rows),
                             list(warnings))
    report.validate()
    return report


def aggregate_rows(rows) -> dict:
    """Per (planner, scene class) cells, plus a pooled "all" class.

    Wall time and cost statistics cover solved rows only (failures would
    saturate at the budget); success rate is reported alongside.  Means and
    stddevs are population statistics (ddof 0).
    """
    cells: dict = {}
    for row in rows:
        for cls in (row.scene_class, "all"):
            cells.setdefault(f"{row.planner}|{cls}", []).append(row)
    out = {}
    for key, group in cells.items():
        solved = [r for r in group if r.solved]
        cell = {
            "n": len(group),
            "n_solved": len(solved),
            "success_rate": len(solved) / len(group),
        }
        if solved:
            times = np.array([r.wall_time for r in solved])
            costs = np.array([r.cost for r in solved])
            cell.update(time_mean=float(np.mean(times)),
                        time_std=float(np.std(times)),
                        cost_mean=float(np.mean(costs)),
                        cost_std=float(np.std(costs)))
        out[key] = cell
    return out


# -- discriminator ablation --------------------------------------------------

@dataclass
class AblationRow:
    problem: int
    scene_seed: int
    seed: int
    status_single: str               # one waypoint per iteration, no D
    status_batch: str                # N_B waypoints, D picks
    time_single: float
    time_batch: float
    cost_single: float | None
    cost_batch: float | None
    gen_calls_single: int
    gen_calls_batch: int


@dataclass
class AblationReport:
    system: str
    n_batch: int
    rows: list
    summary: dict


def run_ablation(system, envs: dict, policy, suite,
                 cfg: PlannerConfig | None = None,
                 sst_cfg: SstConfig | None = None,
                 n_batch: int = 32) -> AblationReport:
    """Paired mp-path runs: without discriminator vs with, identical seeds."""
    cfg = cfg if cfg is not None else PlannerConfig()
    voxels = {seed: voxelize(env) for seed, env in envs.items()}
    rows = []
    for case in suite:
        env, voxel = envs[case.scene_seed], voxels[case.scene_seed]
        cfg_a = replace(cfg, seed=case.seed, use_discriminator=False)
        cfg_b = replace(cfg, seed=case.seed, use_discriminator=True,
                        batch_size=n_batch)
        res_a = mpnet_path_plan(system, env, policy, case.x_init, case.x_goal,
                                cfg_a, sst_cfg, voxel=voxel)
        res_b = mpnet_path_plan(system, env, policy, case.x_init, case.x_goal,
                                cfg_b, sst_cfg, voxel=voxel)
        rows.append(AblationRow(
            case.index, case.scene_seed, case.seed, res_a.status, res_b.status,
            res_a.wall_time, res_b.wall_time, res_a.cost, res_b.cost,
            res_a.stats.get("gen_calls", 0), res_b.stats.get("gen_calls", 0)))
    return AblationReport(system.name, n_batch, rows, ablation_summary(rows))


def ablation_summary(rows) -> dict:
    """Paired statistics over problems both variants solved.

    One-sided sign tests: H1 "the discriminator variant is faster" (and
    cheaper); ties are dropped, no-pair summaries report p = 1.0.
    """
    both = [r for r in rows
            if r.status_single == "solved" and r.status_batch == "solved"]
    out = {
        "n_problems": len(rows),
        "n_both_solved": len(both),
        "solved_single": sum(r.status_single == "solved" for r in rows),
        "solved_batch": sum(r.status_batch == "solved" for r in rows),
    }
    if both:
        out.update(
            time_mean_single=float(np.mean([r.time_single for r in both])),
            time_mean_batch=float(np.mean([r.time_batch for r in both])),
            cost_mean_single=float(np.mean([r.cost_single for r in both])),
            cost_mean_batch=float(np.mean([r.cost_batch for r in both])),
        )
    for metric, a_key, b_key in (("time", "time_single", "time_batch"),
                                 ("cost", "cost_single", "cost_batch")):
        wins = sum(getattr(r, b_key) < getattr(r, a_key) for r in both)
        losses = sum(getattr(r, b_key) > getattr(r, a_key) for r in both)
        n = wins + losses
        p = binomtest(wins, n, 0.5, alternative="greater").pvalue if n \
            else 1.0
        out[f"{metric}_wins_batch"] = int(wins)
        out[f"{metric}_sign_p"] = float(p)
    return out


# -- exports ----------------------------------------------------------------

def export_benchmark(report: BenchmarkReport, outdir):
    """rows.csv, aggregates.json, quantiles.csv under outdir."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rows.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROW_FIELDS)
        for r in report.rows:
            w.writerow([getattr(r, f) for f in ROW_FIELDS])
    doc = {"system": report.system, "warnings": report.warnings,
           "aggregates": report.aggregates}
    with open(out / "aggregates.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    _write_quantiles(quantiles_from_rows(report.rows), out / "quantiles.csv")
    return [out / "rows.csv", out / "aggregates.json", out / "quantiles.csv"]


def _write_quantiles(q, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["planner", "scene_class", "metric",
                    "min", "q1", "median", "q3", "max"])
        for (planner, cls, metric), vals in sorted(q.items()):
            w.writerow([planner, cls, metric] + [repr(v) for v in vals])


def quantiles_from_rows(rows) -> dict:
    """Box-plot numbers per (planner, class, metric) over solved rows."""
    groups: dict = {}
    for row in rows:
        if not row.solved:
            continue
        for cls in (row.scene_class, "all"):
            groups.setdefault((row.planner, cls), []).append(row)
    out = {}
    for (planner, cls), group in groups.items():
        for metric, attr in (("wall_time", "wall_time"), ("cost", "cost")):
            vals = np.array([getattr(r, attr) for r in group])
            out[(planner, cls, metric)] = [
                float(v) for v in np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0])]
    return out


def load_rows(path):
    """Read a rows.csv back into ProblemRow objects."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ProblemRow(
                rec["planner"], rec["system"], int(rec["problem"]),
                int(rec["scene_seed"]), rec["scene_class"], int(rec["seed"]),
                rec["status"], float(rec["wall_time"]),
                None if rec["cost"] in ("", "None") else float(rec["cost"]),
                int(rec["iterations"]), int(rec["tree_size"])))
    return rows


def export_ablation(report: AblationReport, outdir):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    fields = ("problem", "scene_seed", "seed", "status_single", "status_batch",
              "time_single", "time_batch", "cost_single", "cost_batch",
              "gen_calls_single", "gen_calls_batch")
    with open(out / "ablation_rows.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in report.rows:
            w.writerow([getattr(r, f) for f in fields])
    doc = {"system": report.system, "n_batch": report.n_batch,
           "summary": report.summary}
    with open(out / "ablation_summary.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return [out / "ablation_rows.csv", out / "ablation_summary.json"]
