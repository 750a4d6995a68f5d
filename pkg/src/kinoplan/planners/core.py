"""Planning algorithms: neural path/tree planners, SST, stage-wise exploration.

All planners share one tree and one iteration budget split into three phases:
learned waypoints steered by CEM (iterations 1..N1), learned waypoints steered
by random shooting (N1+1..N2), and SST-style uniform exploration with witness
pruning afterwards.  ``mpnet_path_plan`` / ``mpnet_tree_plan`` default to
N1=0.6n, N2=0.8n; ``sst_plan`` is the pure third phase.

A policy object supplies the learned components:

    encode(voxel) -> z            1-d latent, computed once per plan call
    generate(z, states, goal, rng) -> (k, d) one stochastic waypoint per row
    cost(z, states, goal) -> (k,) estimated time-to-reach the goal

Determinism: a planner draws everything from one seeded generator, except the
batched CEM of the tree planner, which derives one integer per iteration and
fans it out to per-element streams, so results do not depend on worker count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..environments import Environment, VoxelGrid, collision_free, valid_trajectory, voxelize
from ..errors import ContractViolation
from ..steering import CemParams, batch_cem_steer, cem_steer, random_shoot
from ..systems.base import System, Trajectory
from .tree import SearchTree, WitnessSet, extract_path, metric_rows, reached


@dataclass
class PlannerConfig:
    """Shared planner knobs; ``n1``/``n2`` default to 0.6/0.8 of the budget."""

    max_iterations: int = 2000
    batch_size: int = 32
    goal_radius: float | None = None     # None -> system.goal_radius
    n1: int | None = None                # end of the neural+CEM phase
    n2: int | None = None                # end of the neural+shooting phase
    time_budget: float = 60.0
    seed: int = 0
    use_discriminator: bool = True
    acceptance_factor: float = 2.0       # accept edges within factor*goal_radius
    workers: int = 1
    cem: CemParams | None = None
    shoot_samples: int = 64              # phase-2 random-shoot budget
    witness_neural_phases: bool = False  # witness-prune neural insertions too
    check_invariants: bool = False
    refine: bool = False                 # SST anytime mode: spend the whole
    # budget and return the cheapest goal-reaching path instead of the first
    linear_threshold: int = 2000

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ContractViolation("max_iterations must be >= 0")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.goal_radius is not None and self.goal_radius <= 0:
            raise ContractViolation("goal_radius must be positive")
        for v in (self.n1, self.n2):
            if v is not None and not 0 <= v <= self.max_iterations:
                raise ContractViolation("stage thresholds must lie in [0, max_iterations]")
        if self.n1 is not None and self.n2 is not None and self.n1 > self.n2:
            raise ContractViolation("stage thresholds must satisfy n1 <= n2")
        if self.time_budget <= 0:
            raise ContractViolation("time_budget must be positive")
        if self.acceptance_factor <= 0:
            raise ContractViolation("acceptance_factor must be positive")
        if self.workers < 1:
            raise ContractViolation("workers must be >= 1")
        if self.shoot_samples < 1:
            raise ContractViolation("shoot_samples must be >= 1")

    def thresholds(self):
        n = self.max_iterations
        n1 = self.n1 if self.n1 is not None else int(round(0.6 * n))
        n2 = self.n2 if self.n2 is not None else int(round(0.8 * n))
        if not 0 <= n1 <= n2 <= n:
            raise ContractViolation("stage thresholds must satisfy 0 <= n1 <= n2 <= n")
        return n1, n2


@dataclass
class SstConfig:
    """SST-style extension knobs (also used by the staged third phase)."""

    delta_bn: float = 1.0       # best-near selection radius
    delta_v: float = 0.3        # witness radius
    shoot_samples: int = 1      # uniform propagations per extension
    goal_bias: float = 0.05

    def __post_init__(self):
        if self.delta_bn <= 0 or self.delta_v <= 0:
            raise ContractViolation("selection and witness radii must be positive")
        if self.shoot_samples < 1:
            raise ContractViolation("shoot_samples must be >= 1")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ContractViolation("goal_bias must be in [0, 1]")


@dataclass
class PlanResult:
    status: str                      # solved | failed | timeout
    trajectory: Trajectory | None
    iterations: int
    wall_time: float
    tree_size: int
    cost: float | None = None
    stats: dict = field(default_factory=dict)

    @property
    def solved(self) -> bool:
        return self.status == "solved"


def _as_generator(rng, seed):
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return np.random.default_rng(seed)
    return np.random.default_rng(rng)


class _Engine:
    """One planning run: tree, witnesses, goal bookkeeping, stats."""

    def __init__(self, system, env, x_init, x_goal, cfg, sst_cfg, rng):
        self.system = system
        self.env = env
        self.x_goal = np.asarray(x_goal, dtype=float)
        self.cfg = cfg
        self.sst_cfg = sst_cfg
        self.rng = rng
        self.goal_radius = cfg.goal_radius if cfg.goal_radius is not None \
            else system.goal_radius
        self.r_acc = cfg.acceptance_factor * self.goal_radius
        self.tree = SearchTree(system, x_init, cfg.linear_threshold)
        self.witnesses = WitnessSet(system, sst_cfg.delta_v, cfg.linear_threshold)
        self.shoot_params = cfg.cem if cfg.cem is not None \
            else CemParams.for_system(system)
        self.goal_hits: dict[int, float] = {}
        self.stats = {
            "gen_calls": 0, "disc_calls": 0, "cem_calls": 0, "shoot_calls": 0,
            "nodes_added": 0, "nodes_rejected": 0, "nodes_pruned": 0,
            "phase1_iterations": 0, "phase2_iterations": 0, "phase3_iterations": 0,
            "max_accept_distance": 0.0,
        }

    def solved_node(self):
        if not self.goal_hits:
            return None
        return min(self.goal_hits, key=lambda i: (self.tree.cost[i], i))

    def _deactivate(self, node):
        self.tree.deactivate(node)
        self.goal_hits.pop(node, None)

    def insert(self, parent: int, traj: Trajectory, use_witness: bool):
        """Add an edge, applying witness dominance when requested.

        Returns the new node id, or None when the witness rejects the edge.
        """
        new_cost = self.tree.cost[parent] + traj.total_duration
        w = None
        if use_witness:
            w = self.witnesses.locate(traj.terminal_state)
            if self.witnesses.dominated(w, new_cost):
                self.stats["nodes_rejected"] += 1
                return None
        node = self.tree.add_child(parent, traj)
        # same orientation and accumulation as the index's within() so the
        # incremental goal set and reached() agree bitwise at the boundary
        gd = float(metric_rows(self.system, self.x_goal,
                               traj.terminal_state[None, :])[0])
        if gd <= self.goal_radius:
            self.goal_hits[node] = gd
        if use_witness:
            old = self.witnesses.assign(w, node, new_cost)
            if old is not None:
                self._deactivate(old)
                self.stats["nodes_pruned"] += self.tree.prune_orphans(old)
            if self.cfg.check_invariants:
                self._check_insertion(w, node, new_cost, old)
        self.stats["nodes_added"] += 1
        return node

    def _check_insertion(self, w, node, new_cost, displaced):
        if displaced is not None and self.tree.index.is_active(displaced):
            raise AssertionError("displaced node left active")
        if not self.tree.index.is_active(node):
            raise AssertionError("accepted node not active")
        if self.witnesses.rep[w] != node or self.witnesses.rep_cost[w] != new_cost:
            raise AssertionError("witness bookkeeping out of sync")
        if self.stats["nodes_added"] % 1000 == 0:
            check_sst_invariants(self.tree, self.witnesses)


def _accepts(engine: _Engine, res) -> bool:
    """Edge acceptance: collision-free, close to its waypoint, non-degenerate."""
    return (not res.in_collision) and res.duration > 0.0 \
        and res.terminal_distance <= engine.r_acc


def _sst_iteration(engine: _Engine, rng):
    """One SST extension: biased target, best-near select, shoot, dominance."""
    cfg = engine.sst_cfg
    if rng.random() < cfg.goal_bias:
        target = engine.x_goal.copy()
    else:
        target = engine.system.sample_state(rng)
    sel = engine.tree.best_near(target, cfg.delta_bn)
    res = random_shoot(engine.system, engine.env, engine.tree.state(sel),
                       target, cfg.shoot_samples, rng,
                       params=engine.shoot_params)
    engine.stats["shoot_calls"] += 1
    if res.in_collision or res.duration <= 0.0:
        engine.stats["nodes_rejected"] += 1
        return
    engine.insert(sel, res.trajectory, use_witness=True)


def _path_iteration(engine: _Engine, policy, z, current, phase, cem, rng):
    """One path-planner extension; returns the next current node id."""
    cfg = engine.cfg
    n_cand = cfg.batch_size if cfg.use_discriminator else 1
    starts = np.broadcast_to(engine.tree.state(current),
                             (n_cand, engine.system.state_dim))
    cand = np.asarray(policy.generate(z, starts, engine.x_goal, rng), dtype=float)
    engine.stats["gen_calls"] += n_cand
    if n_cand > 1:
        costs = np.asarray(policy.cost(z, cand, engine.x_goal), dtype=float)
        engine.stats["disc_calls"] += n_cand
        waypoint = cand[int(np.argmin(costs))]
    else:
        waypoint = cand[0]
    if phase == 1:
        res = cem_steer(engine.system, engine.env, engine.tree.state(current),
                        waypoint, cem, rng)
        engine.stats["cem_calls"] += 1
    else:
        res = random_shoot(engine.system, engine.env, engine.tree.state(current),
                           waypoint, cfg.shoot_samples, rng,
                           params=engine.shoot_params)
        engine.stats["shoot_calls"] += 1
    if _accepts(engine, res):
        node = engine.insert(current, res.trajectory,
                             use_witness=cfg.witness_neural_phases)
        if node is not None:
            engine.stats["max_accept_distance"] = max(
                engine.stats["max_accept_distance"], res.terminal_distance)
            return node
    else:
        engine.stats["nodes_rejected"] += 1
    return engine.tree.random_active(rng)


def _tree_iteration(engine: _Engine, policy, z, phase, cem, rng):
    """One tree-planner extension: batch of nearest-node expansions."""
    cfg = engine.cfg
    nb = cfg.batch_size
    samples = np.stack([engine.system.sample_state(rng) for _ in range(nb)])
    anchors = [engine.tree.nearest(samples[b]) for b in range(nb)]
    starts = np.stack([engine.tree.state(a) for a in anchors])
    cand = np.asarray(policy.generate(z, starts, engine.x_goal, rng), dtype=float)
    engine.stats["gen_calls"] += nb
    if phase == 1:
        batch_seed = int(rng.integers(0, 2**62))
        results = batch_cem_steer(engine.system, engine.env, starts, cand,
                                  cem, batch_seed, cfg.workers)
        engine.stats["cem_calls"] += nb
    else:
        results = [random_shoot(engine.system, engine.env, starts[b], cand[b],
                                cfg.shoot_samples, rng,
                                params=engine.shoot_params)
                   for b in range(nb)]
        engine.stats["shoot_calls"] += nb
    for b, res in enumerate(results):
        if _accepts(engine, res):
            node = engine.insert(anchors[b], res.trajectory,
                                 use_witness=cfg.witness_neural_phases)
            if node is not None:
                engine.stats["max_accept_distance"] = max(
                    engine.stats["max_accept_distance"], res.terminal_distance)
                continue
        engine.stats["nodes_rejected"] += 1


def _finish(engine, status, iterations, t0, goal_node=None):
    wall = time.perf_counter() - t0
    if goal_node is None:
        return PlanResult(status, None, iterations, wall, engine.tree.n_nodes,
                          None, engine.stats)
    traj = extract_path(engine.tree, goal_node)
    return PlanResult("solved", traj, iterations, wall, engine.tree.n_nodes,
                      engine.tree.cost[goal_node], engine.stats)


def _run(system, env, policy, x_init, x_goal, cfg, sst_cfg, rng, mode, voxel):
    t0 = time.perf_counter()
    x_init = np.asarray(x_init, dtype=float)
    rng = _as_generator(rng, cfg.seed)
    n1, n2 = cfg.thresholds()
    if n2 > 0 and policy is None:
        raise ContractViolation("neural phases require a policy; "
                                "set n1=n2=0 or provide one")
    if mode not in ("path", "tree"):
        raise ContractViolation(f"unknown planner mode {mode!r}")

    if not collision_free(system, env, x_init):
        return PlanResult("failed", None, 0, time.perf_counter() - t0, 0, None,
                          {"reason": "initial state in collision"})

    engine = _Engine(system, env, x_init, x_goal, cfg, sst_cfg, rng)
    z = policy.encode(voxel if voxel is not None else voxelize(env)) \
        if n2 > 0 else None
    cem = cfg.cem if cfg.cem is not None else CemParams.for_system(system)

    goal = reached(engine.tree, engine.x_goal, engine.goal_radius)
    if goal is not None:
        return _finish(engine, "solved", 0, t0, goal)

    current = 0
    status = "failed"
    iterations = 0
    for i in range(1, cfg.max_iterations + 1):
        if time.perf_counter() - t0 > cfg.time_budget:
            status = "timeout"
            break
        iterations = i
        if i <= n1:
            phase = 1
        elif i <= n2:
            phase = 2
        else:
            phase = 3
        engine.stats[f"phase{phase}_iterations"] += 1
        if phase == 3:
            _sst_iteration(engine, rng)
        elif mode == "path":
            current = _path_iteration(engine, policy, z, current, phase, cem, rng)
        else:
            _tree_iteration(engine, policy, z, phase, cem, rng)
        goal = engine.solved_node()
        if goal is not None:
            if cfg.check_invariants:
                assert goal == reached(engine.tree, engine.x_goal,
                                       engine.goal_radius)
            return _finish(engine, "solved", iterations, t0, goal)
    return _finish(engine, status, iterations, t0)


def staged_plan(system: System, env: Environment, policy, x_init, x_goal,
                cfg: PlannerConfig | None = None,
                sst_cfg: SstConfig | None = None,
                rng=None, mode: str = "path",
                voxel: VoxelGrid | None = None) -> PlanResult:
    """Three-phase planner; n1=n2=0 degenerates to SST, n1=n2=n to pure neural."""
    cfg = cfg if cfg is not None else PlannerConfig()
    sst_cfg = sst_cfg if sst_cfg is not None else SstConfig()
    return _run(system, env, policy, x_init, x_goal, cfg, sst_cfg, rng, mode, voxel)


def mpnet_path_plan(system: System, env: Environment, policy, x_init, x_goal,
                    cfg: PlannerConfig | None = None,
                    sst_cfg: SstConfig | None = None,
                    rng=None, voxel: VoxelGrid | None = None) -> PlanResult:
    """Single-walker planner: waypoint batch, discriminator argmin, CEM steer."""
    cfg = cfg if cfg is not None else PlannerConfig(batch_size=32)
    return staged_plan(system, env, policy, x_init, x_goal, cfg,
                       sst_cfg, rng, "path", voxel)


def mpnet_tree_plan(system: System, env: Environment, policy, x_init, x_goal,
                    cfg: PlannerConfig | None = None,
                    sst_cfg: SstConfig | None = None,
                    rng=None, voxel: VoxelGrid | None = None) -> PlanResult:
    """Batch planner: expand nearest nodes of random states simultaneously."""
    cfg = cfg if cfg is not None else PlannerConfig(batch_size=16)
    return staged_plan(system, env, policy, x_init, x_goal, cfg,
                       sst_cfg, rng, "tree", voxel)


def sst_plan(system: System, env: Environment, x_init, x_goal,
             cfg: PlannerConfig | None = None,
             sst_cfg: SstConfig | None = None, rng=None) -> PlanResult:
    """Plain SST: uniform targets, best-near selection, witness pruning."""
    cfg = cfg if cfg is not None else PlannerConfig()
    sst_cfg = sst_cfg if sst_cfg is not None else SstConfig()
    t0 = time.perf_counter()
    x_init = np.asarray(x_init, dtype=float)
    rng = _as_generator(rng, cfg.seed)
    if not collision_free(system, env, x_init):
        return PlanResult("failed", None, 0, time.perf_counter() - t0, 0, None,
                          {"reason": "initial state in collision"})
    engine = _Engine(system, env, x_init, x_goal, cfg, sst_cfg, rng)
    goal = reached(engine.tree, engine.x_goal, engine.goal_radius)
    if goal is not None:
        return _finish(engine, "solved", 0, t0, goal)
    status = "failed"
    iterations = 0
    for i in range(1, cfg.max_iterations + 1):
        if time.perf_counter() - t0 > cfg.time_budget:
            status = "timeout"
            break
        iterations = i
        engine.stats["phase3_iterations"] += 1
        _sst_iteration(engine, rng)
        goal = engine.solved_node()
        if goal is not None and not cfg.refine:
            if cfg.check_invariants:
                assert goal == reached(engine.tree, engine.x_goal,
                                       engine.goal_radius)
            return _finish(engine, "solved", iterations, t0, goal)
    goal = engine.solved_node()
    if goal is not None:
        if cfg.check_invariants:
            assert goal == reached(engine.tree, engine.x_goal,
                                   engine.goal_radius)
        return _finish(engine, "solved", iterations, t0, goal)
    return _finish(engine, status, iterations, t0)


def check_sst_invariants(tree: SearchTree, witnesses: WitnessSet):
    """Full witness-dominance audit; raises AssertionError on violation."""
    pairs = [(w, witnesses.rep[w]) for w in range(len(witnesses))
             if witnesses.rep[w] is not None]
    if pairs:
        wids = np.array([w for w, _ in pairs])
        nodes = np.array([n for _, n in pairs])
        if len(np.unique(nodes)) != len(nodes):
            raise AssertionError("a node represents two witnesses")
        if any(tree.removed[n] for n in nodes):
            raise AssertionError("a pruned node is still a representative")
        if not all(tree.index.is_active(n) for n in nodes):
            raise AssertionError("an inactive node is still a representative")
        costs = np.array([tree.cost[n] for n in nodes])
        rep_costs = np.array([witnesses.rep_cost[w] for w in wids])
        bad = np.abs(costs - rep_costs) > 1e-9
        if bad.any():
            raise AssertionError(f"witness {wids[bad][0]} cost out of sync")
        rep_states = np.stack([tree.state(n) for n in nodes])
        wit_states = np.stack([witnesses.index.state(w) for w in wids])
        d = tree.system.distance(rep_states, wit_states)
        far = d > witnesses.radius + 1e-9
        if far.any():
            raise AssertionError(
                f"representative {nodes[far][0]} outside witness ball")
    for i in range(len(tree)):
        if tree.is_live(i) and not tree.index.is_active(i) \
                and tree.children[i] == 0:
            raise AssertionError(f"childless inactive node {i} was not pruned")
