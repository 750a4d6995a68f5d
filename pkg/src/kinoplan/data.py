"""Demonstration data: SST-generated trajectories, labels, splits, files.

A dataset directory looks like:

    manifest.yaml               counts, scene roles, split, format version
    scenes/scene_<seed>.yaml    obstacle layout
    scenes/scene_<seed>.kvx     voxel grid (binary, written once per scene)
    demos/scene_<seed>.yaml     demonstrations for that scene

Cost-to-go labels are suffix sums of segment durations: the label of the
sample starting at waypoint j is the total remaining time from waypoint j.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .environments import (
    collision_free, generate_scene, load_scene, load_voxel,
    sample_free_state, save_scene, save_voxel, valid_trajectory, voxelize,
)
from .errors import ContractViolation
from .neuro.train import SampleSet
from .planners import PlannerConfig, SstConfig, sst_plan
from .systems import Trajectory, get_system

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEFAULT_TEST_FRACTION = 0.15


@dataclass
class Demonstration:
    """One solved SST problem: the trajectory doubles as the waypoint list."""

    system: str
    scene_seed: int
    x_init: np.ndarray
    x_goal: np.ndarray
    trajectory: Trajectory

    def __post_init__(self):
        self.x_init = np.asarray(self.x_init, dtype=float)
        self.x_goal = np.asarray(self.x_goal, dtype=float)

    @property
    def waypoints(self):
        """(T+1, d): segment start states plus the terminal state."""
        return np.vstack([self.trajectory.states,
                          self.trajectory.terminal_state[None, :]])

    @property
    def num_steps(self) -> int:
        return self.trajectory.num_steps

    @property
    def cost(self) -> float:
        return self.trajectory.total_duration

    def cost_to_go(self):
        """(T+1,) suffix duration sums; last entry 0."""
        d = self.trajectory.durations
        return np.concatenate([np.cumsum(d[::-1])[::-1], [0.0]])


@dataclass
class DatasetSample:
    """One supervised sample; invalid samples are penalty-labeled negatives."""

    scene_id: int
    demo_id: int
    x_t: np.ndarray
    x_goal: np.ndarray
    x_next: np.ndarray
    cost_to_go: float
    valid: bool


@dataclass
class DatasetManifest:
    """Scene roles, per-scene demo counts, and the train/test assignment."""

    system: str
    seen_seeds: list
    unseen_seeds: list
    demo_counts: dict = field(default_factory=dict)   # scene seed -> count
    test_demos: list = field(default_factory=list)    # global demo ids
    desk_scale: bool = True
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        overlap = set(self.seen_seeds) & set(self.unseen_seeds)
        if overlap:
            raise ContractViolation(f"seeds {overlap} are both seen and unseen")

    @property
    def scene_seeds(self):
        """All seeds in scene-id order (seen first, then unseen)."""
        return list(self.seen_seeds) + list(self.unseen_seeds)

    def scene_id(self, seed: int) -> int:
        return self.scene_seeds.index(seed)

    def is_unseen(self, seed: int) -> bool:
        return seed in self.unseen_seeds


def check_demonstration(demo: Demonstration, env, system=None) -> None:
    """Raise unless the trajectory is feasible in the scene and hits the goal.

    Pass the system explicitly when it was built with non-default bounds;
    otherwise it is reconstructed from the stored name.
    """
    system = system if system is not None else get_system(demo.system)
    if not valid_trajectory(system, env, demo.trajectory):
        raise ContractViolation("demonstration trajectory infeasible in its scene")
    if system.distance(demo.trajectory.terminal_state, demo.x_goal) \
            > system.goal_radius:
        raise ContractViolation("demonstration does not reach its goal")


# -- demonstration generation -----------------------------------------------

def sample_problem_pair(system, env, rng, max_goal_distance=None,
                        max_attempts: int = 1000):
    """Collision-free (start, goal), optionally capped in metric distance.

    The cap keeps desk-scale SST budgets realistic on large workspaces (a
    uniform pair on the car arena averages tens of meters apart).
    """
    start = sample_free_state(system, env, rng)
    for _ in range(max_attempts):
        goal = sample_free_state(system, env, rng)
        if max_goal_distance is None \
                or system.distance(start, goal) <= max_goal_distance:
            return start, goal
    raise ContractViolation(
        f"no goal within {max_goal_distance} of the start after "
        f"{max_attempts} attempts")


def generate_demonstrations(system, env, n_pairs: int, seed: int = 0,
                            cfg: PlannerConfig | None = None,
                            sst_cfg: SstConfig | None = None,
                            max_goal_distance=None, scene_seed=None):
    """Run SST on n_pairs sampled problems; keep the solved ones.

    Each pair gets its own rng stream derived from (seed, pair index), so
    results are reproducible regardless of evaluation order.  Returns fewer
    than n_pairs when SST fails or times out on some pairs.  The default
    config runs SST in refine mode: first solutions wander badly, and the
    anytime best path is a far better imitation target.
    """
    if n_pairs < 1:
        raise ContractViolation("n_pairs must be >= 1")
    cfg = cfg if cfg is not None else PlannerConfig(
        max_iterations=100_000, time_budget=60.0, refine=True)
    sst_cfg = sst_cfg if sst_cfg is not None else SstConfig()
    scene_seed = env.seed if scene_seed is None else scene_seed
    demos = []
    for k in range(n_pairs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        start, goal = sample_problem_pair(system, env, rng, max_goal_distance)
        res = sst_plan(system, env, start, goal, cfg, sst_cfg, rng=rng)
        if res.solved and res.trajectory.num_steps > 0:
            demos.append(Demonstration(system.name, int(scene_seed),
                                       start, goal, res.trajectory))
    log.info("scene %s: %d/%d pairs solved", scene_seed, len(demos), n_pairs)
    return demos


# -- dataset assembly -------------------------------------------------------

def penalty_cost(demos) -> float:
    """Negative label: twice the largest demonstration cost."""
    if not demos:
        raise ContractViolation("no demonstrations")
    return 2.0 * max(d.cost for d in demos)


def _collision_state(system, env, rng, max_attempts=2000):
    for _ in range(max_attempts):
        x = system.sample_state(rng)
        if not collision_free(system, env, x):
            return x
    return None


def build_samples(demos, envs: dict, manifest: DatasetManifest, seed: int = 0,
                  system=None):
    """Positives from consecutive waypoint pairs, negatives 1:1.

    envs maps scene seed -> Environment.  Negatives are half uniformly
    sampled in-collision states and half cross-demonstration pairs (a
    waypoint of one demo against the goal of another in the same scene),
    both labeled with the fixed penalty; scenes that cannot produce one kind
    fall back to the other.
    """
    if not demos:
        raise ContractViolation("no demonstrations")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    penalty = penalty_cost(demos)
    samples = []
    by_scene: dict = {}
    for demo_id, demo in enumerate(demos):
        sid = manifest.scene_id(demo.scene_seed)
        by_scene.setdefault(demo.scene_seed, []).append(demo_id)
        w = demo.waypoints
        ctg = demo.cost_to_go()
        for j in range(demo.num_steps):
            samples.append(DatasetSample(sid, demo_id, w[j], demo.x_goal,
                                         w[j + 1], float(ctg[j]), True))

    n_pos = len(samples)
    if system is None:
        system = get_system(demos[0].system)
    # round-robin over scenes; one that can produce neither kind of negative
    # leaves the rotation so productive scenes absorb the quota
    active = sorted(by_scene)
    no_collision: set = set()
    made = spin = 0
    while made < n_pos and active:
        scene_seed = active[spin % len(active)]
        spin += 1
        env = envs[scene_seed]
        sid = manifest.scene_id(scene_seed)
        ids = by_scene[scene_seed]
        want_collision = (made % 2 == 0)
        can_cross = len(ids) >= 2
        x = None
        if scene_seed not in no_collision and (want_collision or not can_cross):
            x = _collision_state(system, env, rng)
            if x is None:
                no_collision.add(scene_seed)
        if x is not None:
            demo = demos[ids[int(rng.integers(len(ids)))]]
            samples.append(DatasetSample(sid, -1, x, demo.x_goal, x,
                                         penalty, False))
            made += 1
        elif can_cross:
            a, b = rng.choice(len(ids), size=2, replace=False)
            da, db = demos[ids[a]], demos[ids[b]]
            wa = da.waypoints
            x = wa[int(rng.integers(len(wa)))]
            samples.append(DatasetSample(sid, -1, x, db.x_goal, x,
                                         penalty, False))
            made += 1
        else:
            log.warning("scene %s: no negative samples available", scene_seed)
            active.remove(scene_seed)
    if made < n_pos:
        log.warning("negatives: built %d of %d", made, n_pos)
    return samples


def split_samples(samples, demos, manifest: DatasetManifest, seed: int = 0,
                  test_fraction: float = DEFAULT_TEST_FRACTION):
    """Deterministic train/test split, never dividing a demonstration.

    Unseen-scene samples go to test wholesale.  Seen-scene demonstrations
    are shuffled and moved to test until the positive-sample fraction
    reaches test_fraction; the result must land in [0.10, 0.20].  Negatives
    (demo_id -1) follow their scene: unseen -> test, seen -> train.
    Updates manifest.test_demos and returns (train, test) sample lists.
    """
    if not 0.10 <= test_fraction <= 0.20:
        raise ContractViolation("test fraction must be in [0.10, 0.20]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5911]))
    seen_ids = [i for i, d in enumerate(demos)
                if not manifest.is_unseen(d.scene_seed)]
    pos_per_demo = {i: demos[i].num_steps for i in seen_ids}
    total = sum(pos_per_demo.values())
    order = list(rng.permutation(seen_ids))
    test_ids: set = set()
    got = 0
    for demo_id in order:
        if got >= test_fraction * total:
            break
        # skip demos that would push past the ceiling; smaller ones may fit
        if total and (got + pos_per_demo[demo_id]) / total > 0.20:
            continue
        test_ids.add(int(demo_id))
        got += pos_per_demo[demo_id]
    frac = got / total if total else 0.0
    if not 0.10 <= frac <= 0.20:
        raise ContractViolation(
            f"achievable test fraction {frac:.3f} outside [0.10, 0.20]; "
            "demonstrations are too coarse")
    manifest.test_demos = sorted(test_ids)
    return apply_split(samples, manifest)


def apply_split(samples, manifest: DatasetManifest):
    """Partition by the manifest's recorded assignment (train, test)."""
    test_ids = set(manifest.test_demos)
    train, test = [], []
    for s in samples:
        unseen = manifest.is_unseen(manifest.scene_seeds[s.scene_id])
        if unseen or s.demo_id in test_ids:
            test.append(s)
        else:
            train.append(s)
    return train, test


# -- adapters to the training code ------------------------------------------

def to_sample_set(samples, target: str) -> SampleSet:
    """Pack DatasetSamples for training.

    target="generator": valid samples only, targets = next waypoints.
    target="discriminator": all samples, targets = cost labels; positives
    weighted 1/(N_p * T_i) over the subset, negatives 1/n_neg so both sides
    carry total mass 1.
    """
    if target not in ("generator", "discriminator"):
        raise ContractViolation(f"unknown target {target!r}")
    pos = [s for s in samples if s.valid]
    if not pos:
        raise ContractViolation("no valid samples")
    steps_per_demo: dict = {}
    for s in pos:
        steps_per_demo[s.demo_id] = steps_per_demo.get(s.demo_id, 0) + 1
    n_demos = len(steps_per_demo)

    def pos_weight(s):
        return 1.0 / (n_demos * steps_per_demo[s.demo_id])

    if target == "generator":
        chosen = pos
        targets = np.array([s.x_next for s in chosen])
        weights = np.array([pos_weight(s) for s in chosen])
    else:
        neg = [s for s in samples if not s.valid]
        chosen = pos + neg
        targets = np.array([s.cost_to_go for s in chosen])
        weights = np.concatenate([
            np.array([pos_weight(s) for s in pos]),
            np.full(len(neg), 1.0 / len(neg)) if neg else np.empty(0),
        ])
    return SampleSet(
        scene_ids=np.array([s.scene_id for s in chosen]),
        x_t=np.array([s.x_t for s in chosen]),
        x_goal=np.array([s.x_goal for s in chosen]),
        targets=targets,
        weights=weights,
        valid=np.array([s.valid for s in chosen]),
    )


def dataset_voxels(manifest: DatasetManifest, envs: dict):
    """Voxel grids in scene-id order, ready for the trainers."""
    return [voxelize(envs[seed]) for seed in manifest.scene_seeds]


# -- serialization ----------------------------------------------------------

def _demo_doc(demo: Demonstration) -> dict:
    t = demo.trajectory
    return {
        "system": demo.system,
        "scene_seed": int(demo.scene_seed),
        "x_init": demo.x_init.tolist(),
        "x_goal": demo.x_goal.tolist(),
        "states": t.states.tolist(),
        "controls": t.controls.tolist(),
        "durations": t.durations.tolist(),
        "terminal": t.terminal_state.tolist(),
    }


def _demo_from_doc(doc: dict) -> Demonstration:
    traj = Trajectory(np.array(doc["states"], dtype=float),
                      np.array(doc["controls"], dtype=float),
                      np.array(doc["durations"], dtype=float),
                      np.array(doc["terminal"], dtype=float))
    return Demonstration(doc["system"], int(doc["scene_seed"]),
                         np.array(doc["x_init"], dtype=float),
                         np.array(doc["x_goal"], dtype=float), traj)


def save_demos(path, demos):
    """One YAML file holding a list of demonstrations."""
    with open(path, "w") as fh:
        yaml.safe_dump([_demo_doc(d) for d in demos], fh)


def load_demos(path):
    with open(path) as fh:
        return [_demo_from_doc(d) for d in (yaml.safe_load(fh) or [])]


def make_manifest(system_name: str, seen, unseen, demos,
                  desk_scale: bool = True) -> DatasetManifest:
    """Manifest with per-scene counts derived from the demonstrations."""
    counts = {int(s): 0 for s in list(seen) + list(unseen)}
    for d in demos:
        if d.scene_seed not in counts:
            raise ContractViolation(
                f"demonstration references unknown scene {d.scene_seed}")
        counts[d.scene_seed] += 1
    return DatasetManifest(system_name, list(seen), list(unseen), counts)


def save_dataset(dirpath, manifest: DatasetManifest, demos, envs: dict):
    """Write manifest, scenes, voxels, and per-scene demonstration files.

    Demonstrations must arrive grouped by scene in scene-id order (the
    generation pipeline's natural order); otherwise demo ids would shift
    across a round trip and invalidate the split recorded in the manifest.
    """
    ids = [manifest.scene_id(d.scene_seed) for d in demos]
    if ids != sorted(ids):
        raise ContractViolation("demonstrations must be grouped by scene id")
    root = Path(dirpath)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    (root / "demos").mkdir(parents=True, exist_ok=True)
    by_scene: dict = {}
    for demo in demos:
        by_scene.setdefault(demo.scene_seed, []).append(demo)
    doc = {
        "version": manifest.version,
        "system": manifest.system,
        "seen_seeds": [int(s) for s in manifest.seen_seeds],
        "unseen_seeds": [int(s) for s in manifest.unseen_seeds],
        "demo_counts": {int(s): len(by_scene.get(s, []))
                        for s in manifest.scene_seeds},
        "test_demos": [int(i) for i in manifest.test_demos],
        "desk_scale": bool(manifest.desk_scale),
    }
    with open(root / "manifest.yaml", "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)
    for seed in manifest.scene_seeds:
        save_scene(envs[seed], root / "scenes" / f"scene_{seed}.yaml")
        save_voxel(voxelize(envs[seed]), root / "scenes" / f"scene_{seed}.kvx")
        save_demos(root / "demos" / f"scene_{seed}.yaml", by_scene.get(seed, []))


def load_dataset(dirpath):
    """Returns (manifest, demos, envs); demos ordered by scene-id then file order."""
    root = Path(dirpath)
    with open(root / "manifest.yaml") as fh:
        doc = yaml.safe_load(fh)
    if doc.get("version") != MANIFEST_VERSION:
        raise ContractViolation(
            f"unsupported dataset version {doc.get('version')}")
    manifest = DatasetManifest(
        system=doc["system"],
        seen_seeds=list(doc["seen_seeds"]),
        unseen_seeds=list(doc["unseen_seeds"]),
        demo_counts={int(k): int(v) for k, v in doc["demo_counts"].items()},
        test_demos=list(doc["test_demos"]),
        desk_scale=bool(doc["desk_scale"]),
    )
    envs = {seed: load_scene(root / "scenes" / f"scene_{seed}.yaml")
            for seed in manifest.scene_seeds}
    demos = []
    for seed in manifest.scene_seeds:
        scene_demos = load_demos(root / "demos" / f"scene_{seed}.yaml")
        if len(scene_demos) != manifest.demo_counts.get(seed, 0):
            raise ContractViolation(
                f"scene {seed}: manifest promises "
                f"{manifest.demo_counts.get(seed, 0)} demonstrations, file has "
                f"{len(scene_demos)}")
        demos.extend(scene_demos)
    return manifest, demos, envs


def verify_voxel_integrity(dirpath, manifest: DatasetManifest, envs: dict):
    """Re-voxelize every scene and compare with the stored grid bit for bit."""
    root = Path(dirpath)
    for seed in manifest.scene_seeds:
        stored = load_voxel(root / "scenes" / f"scene_{seed}.kvx")
        if stored != voxelize(envs[seed]):
            raise ContractViolation(f"scene {seed}: voxel file out of date")


def default_scene_set(system, n_seen: int = 10, n_unseen: int = 2):
    """The paper-shaped scene collection: seeds 0..n_seen-1 seen, the next
    n_unseen unseen."""
    seen = list(range(n_seen))
    unseen = list(range(n_seen, n_seen + n_unseen))
    envs = {seed: generate_scene(system, seed) for seed in seen + unseen}
    return seen, unseen, envs
