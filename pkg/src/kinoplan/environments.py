"""Obstacle scenes, per-system collision checking, scene generation, voxelization.

Robot footprints live here rather than in the system models: a system defines
dynamics and a metric, this module defines what the robot occupies in the
workspace (segments for the pendulum arms, a point for the car, a box for the
quadrotor).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ContractViolation, SceneGenerationError
from .systems import System, Trajectory

VOXEL_SIZE = 32
VOXEL_SAMPLE_DENSITY = 20000        # target samples if obstacles filled the workspace
VOXEL_MIN_SAMPLES = 64              # floor per obstacle so thin boxes still register
_VOXEL_MAGIC = b"KVX1"

WORKSPACES = {
    "acrobot": ([-2.5, -2.5], [2.5, 2.5]),
    "cartpole": ([-30.5, -2.0], [30.5, 2.0]),   # rail +/-30 plus pole reach 0.5
    "car": ([-25.0, -35.0], [25.0, 35.0]),
    "quadrotor": ([-5.0, -5.0, -5.0], [5.0, 5.0, 5.0]),
    "double_integrator": ([-10.0, -1.0], [10.0, 1.0]),
}


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and positive half-extents."""

    center: np.ndarray
    half: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "half", np.asarray(self.half, dtype=float))
        if self.center.shape != self.half.shape or self.center.ndim != 1:
            raise ContractViolation("box center/half shape mismatch")
        if not np.all(self.half > 0):
            raise ContractViolation("box half-extents must be positive")

    @property
    def lo(self):
        return self.center - self.half

    @property
    def hi(self):
        return self.center + self.half

    def volume(self) -> float:
        return float(np.prod(2.0 * self.half))

    def contains(self, pts):
        """Membership test for points of shape (dim,) or (n, dim)."""
        pts = np.asarray(pts, dtype=float)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)


@dataclass
class Environment:
    """Workspace box plus axis-aligned obstacles; immutable after construction."""

    workspace_lo: np.ndarray
    workspace_hi: np.ndarray
    obstacles: list
    seed: int = 0

    def __post_init__(self):
        self.workspace_lo = np.asarray(self.workspace_lo, dtype=float)
        self.workspace_hi = np.asarray(self.workspace_hi, dtype=float)
        if not np.all(self.workspace_lo < self.workspace_hi):
            raise ContractViolation("workspace lo must be < hi")
        for b in self.obstacles:
            if b.center.shape != self.workspace_lo.shape:
                raise ContractViolation("obstacle dimension differs from workspace")
            if np.any(b.hi < self.workspace_lo) or np.any(b.lo > self.workspace_hi):
                raise ContractViolation("obstacle does not intersect workspace")

    @property
    def dim(self) -> int:
        return len(self.workspace_lo)

    def workspace_volume(self) -> float:
        return float(np.prod(self.workspace_hi - self.workspace_lo))

    def free_volume_lower_bound(self) -> float:
        """1 - sum(obstacle volumes)/workspace volume; exact when obstacles are disjoint."""
        occ = sum(b.volume() for b in self.obstacles)
        return 1.0 - occ / self.workspace_volume()


class VoxelGrid:
    """32x32x32 occupancy grid over the workspace.

    2D workspaces rasterize into a 32x32 slab replicated along depth, so the
    grid shape is identical for every system.  ``origin`` and ``cell_size`` are
    3-vectors; for 2D scenes the z entries are 0 and 1.
    """

    def __init__(self, occupancy, origin, cell_size):
        self.occupancy = np.asarray(occupancy, dtype=np.uint8)
        if self.occupancy.shape != (VOXEL_SIZE,) * 3:
            raise ContractViolation(
                f"voxel grid must be {VOXEL_SIZE}^3, got {self.occupancy.shape}")
        self.origin = np.asarray(origin, dtype=float)
        self.cell_size = np.asarray(cell_size, dtype=float)

    def occupied_fraction(self) -> float:
        return float(np.mean(self.occupancy))

    def __eq__(self, other):
        return (isinstance(other, VoxelGrid)
                and np.array_equal(self.occupancy, other.occupancy)
                and np.array_equal(self.origin, other.origin)
                and np.array_equal(self.cell_size, other.cell_size))


# -- geometry primitives ----------------------------------------------------

def _segments_hit_box(p0, p1, lo, hi):
    """Slab test for segments p0->p1 of shape (n, dim) against one box."""
    d = p1 - p0
    d = np.where(np.abs(d) < 1e-300, 1e-300, d)
    t0 = (lo - p0) / d
    t1 = (hi - p0) / d
    tnear = np.max(np.minimum(t0, t1), axis=-1)
    tfar = np.min(np.maximum(t0, t1), axis=-1)
    return (tnear <= tfar) & (tfar >= 0.0) & (tnear <= 1.0)


def _points_free(env: Environment, pts):
    """Points inside the workspace and outside every obstacle; pts (n, dim)."""
    ok = np.all((pts >= env.workspace_lo) & (pts <= env.workspace_hi), axis=-1)
    for b in env.obstacles:
        ok &= ~b.contains(pts)
    return ok


def _segments_free(env: Environment, p0, p1):
    ok = np.ones(len(p0), dtype=bool)
    for b in env.obstacles:
        ok &= ~_segments_hit_box(p0, p1, b.lo, b.hi)
    return ok


def box_separation(a: Box, b: Box) -> float:
    """Euclidean distance between two boxes (0 when they touch or overlap)."""
    gap = np.maximum(np.abs(a.center - b.center) - (a.half + b.half), 0.0)
    return float(np.sqrt(np.sum(gap ** 2)))


# -- collision checking -----------------------------------------------------

def _free_batch_car(system, env, xs):
    pts = xs[:, :2]
    ok = np.all((pts >= system.state_lo[:2]) & (pts <= system.state_hi[:2]), axis=-1)
    return ok & _points_free(env, pts)


def _free_batch_double_integrator(system, env, xs):
    # the footprint point sits at (p, 0); only the x axis needs checking
    p = xs[:, 0]
    lo = max(env.workspace_lo[0], system.state_lo[0])
    hi = min(env.workspace_hi[0], system.state_hi[0])
    ok = (p >= lo) & (p <= hi)
    for b in env.obstacles:
        if b.lo[1] <= 0.0 <= b.hi[1]:
            ok &= ~((p >= b.lo[0]) & (p <= b.hi[0]))
    return ok


def _free_batch_acrobot(system, env, xs):
    l1 = system.params["l1"]
    l2 = system.params["l2"]
    th1 = xs[:, 0]
    th12 = xs[:, 0] + xs[:, 1]
    base = np.zeros((len(xs), 2))
    elbow = np.stack([l1 * np.sin(th1), -l1 * np.cos(th1)], axis=-1)
    tip = elbow + np.stack([l2 * np.sin(th12), -l2 * np.cos(th12)], axis=-1)
    ok = np.all((elbow >= env.workspace_lo) & (elbow <= env.workspace_hi), axis=-1)
    ok &= np.all((tip >= env.workspace_lo) & (tip <= env.workspace_hi), axis=-1)
    ok &= _segments_free(env, base, elbow)
    ok &= _segments_free(env, elbow, tip)
    return ok


def _free_batch_cartpole(system, env, xs):
    ell = system.params["length"]
    n = len(xs)
    cart = np.zeros((n, 2))
    cart[:, 0] = xs[:, 0]
    tip = np.stack([xs[:, 0] + ell * np.sin(xs[:, 2]),
                    ell * np.cos(xs[:, 2])], axis=-1)
    ok = (xs[:, 0] >= system.state_lo[0]) & (xs[:, 0] <= system.state_hi[0])
    ok &= np.all((cart >= env.workspace_lo) & (cart <= env.workspace_hi), axis=-1)
    ok &= np.all((tip >= env.workspace_lo) & (tip <= env.workspace_hi), axis=-1)
    ok &= _points_free(env, cart)
    ok &= _segments_free(env, cart, tip)
    return ok


def _free_batch_quadrotor(system, env, xs):
    r = system.params["half_extent"]
    p = xs[:, :3]
    ok = np.all((p - r >= env.workspace_lo) & (p + r <= env.workspace_hi), axis=-1)
    ok &= np.all((p >= system.state_lo[:3]) & (p <= system.state_hi[:3]), axis=-1)
    for b in env.obstacles:
        hit = np.all(np.abs(p - b.center) <= b.half + r, axis=-1)
        ok &= ~hit
    return ok


_FREE_BATCH = {
    "acrobot": _free_batch_acrobot,
    "cartpole": _free_batch_cartpole,
    "car": _free_batch_car,
    "quadrotor": _free_batch_quadrotor,
    "double_integrator": _free_batch_double_integrator,
}


def collision_free_batch(system: System, env: Environment, xs) -> np.ndarray:
    """Vectorized collision_free over states xs of shape (n, state_dim)."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2 or xs.shape[1] != system.state_dim:
        raise ContractViolation(f"expected (n, {system.state_dim}) states")
    try:
        fn = _FREE_BATCH[system.name]
    except KeyError:
        raise ContractViolation(f"no footprint registered for system {system.name!r}") from None
    return fn(system, env, xs)


def collision_free(system: System, env: Environment, x) -> bool:
    """True iff the robot footprint at x avoids obstacles and stays in bounds."""
    x = np.asarray(x, dtype=float)
    return bool(collision_free_batch(system, env, x[None, :])[0])


def valid_trajectory(system: System, env: Environment, traj: Trajectory) -> bool:
    """Check every dt-resolution substep state along the trajectory."""
    if traj.num_steps == 0:
        return collision_free(system, env, traj.terminal_state)
    states = [traj.states[0].copy()]
    x = traj.states[0].copy()
    for i in range(traj.num_steps):
        for h in system.substep_durations(float(traj.durations[i])):
            x = system.step(x, traj.controls[i], h)
            states.append(x.copy())
    return bool(np.all(collision_free_batch(system, env, np.stack(states))))


def sample_free_state(system: System, env: Environment,
                      rng: np.random.Generator, max_attempts: int = 1000):
    """Rejection-sample a collision-free state."""
    for _ in range(max_attempts):
        x = system.sample_state(rng)
        if collision_free(system, env, x):
            return x
    raise SceneGenerationError(
        f"no collision-free state found in {max_attempts} attempts")


# -- scene generation -------------------------------------------------------

def _scene_rng(name: str, seed: int) -> np.random.Generator:
    # stable across processes: keyed on crc32(name), not the salted builtin hash
    key = zlib.crc32(name.encode())
    return np.random.default_rng(np.random.SeedSequence([key, seed & 0xFFFFFFFFFFFFFFFF]))


def _gen_acrobot(system, rng, budget):
    lo, hi = WORKSPACES["acrobot"]
    # hanging pose must stay free: both links along the negative y axis
    hang0 = np.array([[0.0, 0.0]])
    hang1 = np.array([[0.0, -system.params["l1"]]])
    hang2 = np.array([[0.0, -(system.params["l1"] + system.params["l2"])]])
    boxes = []
    while len(boxes) < 4:
        if budget[0] <= 0:
            raise SceneGenerationError("acrobot scene: attempt budget exhausted")
        budget[0] -= 1
        r = rng.uniform(1.0, 2.0)
        ang = rng.uniform(-np.pi, np.pi)
        center = np.array([r * np.cos(ang), r * np.sin(ang)])
        half = rng.uniform(0.1, 0.3, size=2)
        b = Box(center, half)
        if (_segments_hit_box(hang0, hang1, b.lo, b.hi)[0]
                or _segments_hit_box(hang1, hang2, b.lo, b.hi)[0]):
            continue
        boxes.append(b)
    return Environment(lo, hi, boxes)


def _gen_cartpole(system, rng, budget):
    lo, hi = WORKSPACES["cartpole"]
    ell = system.params["length"]
    boxes = []
    while len(boxes) < 7:
        if budget[0] <= 0:
            raise SceneGenerationError("cartpole scene: attempt budget exhausted")
        budget[0] -= 1
        hx = rng.uniform(0.5, 2.0)
        hy = rng.uniform(0.05, 0.15)
        cx = rng.uniform(lo[0] + hx, hi[0] - hx)
        # keep the cart rail y=0 clear; boxes overlap the pole's +/- 0.5 reach
        side = 1.0 if rng.random() < 0.5 else -1.0
        cy = side * rng.uniform(hy + 0.05, ell + 0.15)
        boxes.append(Box(np.array([cx, cy]), np.array([hx, hy])))
    return Environment(lo, hi, boxes)


def _gen_car(system, rng, budget):
    lo, hi = WORKSPACES["car"]
    clearance = system.params["clearance"]
    gap_lo, gap_hi = 1.5 * clearance, 4.0 * clearance
    boxes = []
    while len(boxes) < 5:
        if budget[0] <= 0:
            raise SceneGenerationError("car scene: attempt budget exhausted")
        budget[0] -= 1
        half = rng.uniform(1.5, 4.0, size=2)
        center = rng.uniform(np.array(lo) + half, np.array(hi) - half)
        b = Box(center, half)
        if boxes:
            sep = min(box_separation(b, other) for other in boxes)
            if not (gap_lo <= sep <= gap_hi):
                continue
        boxes.append(b)
    return Environment(lo, hi, boxes)


def _gen_quadrotor(system, rng, budget):
    lo, hi = WORKSPACES["quadrotor"]
    volume = float(np.prod(np.array(hi) - np.array(lo)))
    while True:
        if budget[0] <= 0:
            raise SceneGenerationError("quadrotor scene: attempt budget exhausted")
        budget[0] -= 1
        boxes = []
        for _ in range(10):
            half = rng.uniform(0.5, 1.2, size=3)
            center = rng.uniform(np.array(lo) + half, np.array(hi) - half)
            boxes.append(Box(center, half))
        if sum(b.volume() for b in boxes) <= 0.7 * volume:
            return Environment(lo, hi, boxes)


def _gen_double_integrator(system, rng, budget):
    lo, hi = WORKSPACES["double_integrator"]
    return Environment(lo, hi, [])


_SCENE_GENERATORS = {
    "acrobot": _gen_acrobot,
    "cartpole": _gen_cartpole,
    "car": _gen_car,
    "quadrotor": _gen_quadrotor,
    "double_integrator": _gen_double_integrator,
}

SCENE_ATTEMPT_BUDGET = 1000


def generate_scene(system: System, seed: int) -> Environment:
    """Deterministic procedural scene for (system, seed)."""
    try:
        gen = _SCENE_GENERATORS[system.name]
    except KeyError:
        raise ContractViolation(f"no scene generator for system {system.name!r}") from None
    rng = _scene_rng(system.name, seed)
    budget = [SCENE_ATTEMPT_BUDGET]
    env = gen(system, rng, budget)
    env.seed = int(seed)
    return env


# -- voxelization -----------------------------------------------------------

def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def voxelize(env: Environment, rng=0) -> VoxelGrid:
    """Rasterize obstacles into a 32^3 occupancy grid by point sampling.

    Each obstacle draws from its own child stream with a count proportional to
    its share of the workspace volume (floor of VOXEL_MIN_SAMPLES), so the
    samples for an obstacle do not depend on which other obstacles are present:
    appending an obstacle can only add occupied cells.
    """
    rng = _as_generator(rng)
    dim = env.dim
    extent = env.workspace_hi - env.workspace_lo
    cell = extent / VOXEL_SIZE
    volume = env.workspace_volume()

    plane = np.zeros((VOXEL_SIZE, VOXEL_SIZE), dtype=np.uint8)
    grid3 = np.zeros((VOXEL_SIZE,) * 3, dtype=np.uint8)
    children = rng.spawn(len(env.obstacles)) if env.obstacles else []
    for b, child in zip(env.obstacles, children):
        n = max(VOXEL_MIN_SAMPLES,
                int(np.ceil(VOXEL_SAMPLE_DENSITY * b.volume() / volume)))
        pts = child.uniform(b.lo, b.hi, size=(n, dim))
        idx = np.floor((pts - env.workspace_lo) / cell).astype(int)
        np.clip(idx, 0, VOXEL_SIZE - 1, out=idx)
        if dim == 2:
            plane[idx[:, 0], idx[:, 1]] = 1
        else:
            grid3[idx[:, 0], idx[:, 1], idx[:, 2]] = 1

    if dim == 2:
        grid3 = np.repeat(plane[:, :, None], VOXEL_SIZE, axis=2)
        origin = np.array([env.workspace_lo[0], env.workspace_lo[1], 0.0])
        cell_size = np.array([cell[0], cell[1], 1.0])
    else:
        origin = env.workspace_lo.copy()
        cell_size = cell.copy()
    return VoxelGrid(grid3, origin, cell_size)


# -- serialization ----------------------------------------------------------

def save_scene(env: Environment, path):
    doc = {
        "seed": int(env.seed),
        "workspace": {"lo": env.workspace_lo.tolist(),
                      "hi": env.workspace_hi.tolist()},
        "obstacles": [{"center": b.center.tolist(), "half": b.half.tolist()}
                      for b in env.obstacles],
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def load_scene(path) -> Environment:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    boxes = [Box(np.array(o["center"]), np.array(o["half"]))
             for o in doc.get("obstacles", [])]
    return Environment(np.array(doc["workspace"]["lo"]),
                       np.array(doc["workspace"]["hi"]),
                       boxes, seed=int(doc.get("seed", 0)))


def save_voxel(grid: VoxelGrid, path):
    """Binary layout: magic 'KVX1', origin 3*f64 LE, cell size 3*f64 LE, 32^3 bytes C-order."""
    header = _VOXEL_MAGIC + struct.pack("<3d3d", *grid.origin, *grid.cell_size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.occupancy, dtype=np.uint8).tobytes())


def load_voxel(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _VOXEL_MAGIC:
        raise ContractViolation(f"{path}: not a voxel grid file")
    vals = struct.unpack("<3d3d", blob[4:52])
    occ = np.frombuffer(blob[52:52 + VOXEL_SIZE ** 3], dtype=np.uint8)
    if occ.size != VOXEL_SIZE ** 3:
        raise ContractViolation(f"{path}: truncated voxel payload")
    return VoxelGrid(occ.reshape((VOXEL_SIZE,) * 3).copy(),
                     np.array(vals[:3]), np.array(vals[3:]))
