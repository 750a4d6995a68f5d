"""Local steering: CEM-based MPC over control/duration sequences, random shooting.

The optimizer treats each candidate as H segments of (control, duration), the
durations forming an elastic time parameterization.  Scoring adds a soft
collision penalty (fraction of dt-substeps in collision) to the terminal
distance; the returned trajectory is the best candidate truncated at its
best collision-free prefix substep.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .environments import Environment, collision_free_batch
from .errors import ContractViolation
from .systems import System, Trajectory

DEFAULT_W_C = 100.0


def default_tau_bounds(system: System):
    """Short segments for the fine-step systems, longer for car/quadrotor."""
    if system.dt < 0.01:
        return 0.05, 0.5
    return 0.1, 1.0


@dataclass
class CemParams:
    """Sampling distribution and schedule for the CEM optimizer."""

    horizon: int
    control_mean: np.ndarray    # (H, cu)
    control_std: np.ndarray     # (H, cu)
    duration_mean: np.ndarray   # (H,)
    duration_std: np.ndarray    # (H,)
    n_samples: int = 64
    n_elite: int = 8
    n_iter: int = 20
    alpha: float = 0.7
    tau_min: float = 0.1
    tau_max: float = 1.0
    w_c: float = DEFAULT_W_C
    eps_converge: float = 0.1

    def __post_init__(self):
        self.control_mean = np.atleast_2d(np.asarray(self.control_mean, dtype=float))
        self.control_std = np.atleast_2d(np.asarray(self.control_std, dtype=float))
        self.duration_mean = np.atleast_1d(np.asarray(self.duration_mean, dtype=float))
        self.duration_std = np.atleast_1d(np.asarray(self.duration_std, dtype=float))
        if self.horizon < 1:
            raise ContractViolation("horizon must be >= 1")
        if self.n_elite > self.n_samples:
            raise ContractViolation("n_elite must be <= n_samples")
        if self.tau_min <= 0 or self.tau_max < self.tau_min:
            raise ContractViolation("need 0 < tau_min <= tau_max")
        if not (0.0 <= self.alpha <= 1.0):
            raise ContractViolation("alpha must lie in [0, 1]")
        if np.any(self.control_std < 0) or np.any(self.duration_std < 0):
            raise ContractViolation("stddevs must be non-negative")
        expect = (self.horizon, self.control_mean.shape[1])
        for arr, shape in ((self.control_mean, expect), (self.control_std, expect),
                           (self.duration_mean, (self.horizon,)),
                           (self.duration_std, (self.horizon,))):
            if arr.shape != shape:
                raise ContractViolation(f"CemParams field shape {arr.shape} != {shape}")

    @classmethod
    def for_system(cls, system: System, horizon: int = 3, **overrides):
        """Defaults: control means at bound midpoints with half-range stddev."""
        tau_min, tau_max = default_tau_bounds(system)
        tau_min = overrides.pop("tau_min", tau_min)
        tau_max = overrides.pop("tau_max", tau_max)
        mid = 0.5 * (system.control_lo + system.control_hi)
        spread = 0.5 * (system.control_hi - system.control_lo)
        fields = dict(
            horizon=horizon,
            control_mean=np.tile(mid, (horizon, 1)),
            control_std=np.tile(spread, (horizon, 1)),
            duration_mean=np.full(horizon, 0.5 * (tau_min + tau_max)),
            duration_std=np.full(horizon, 0.5 * (tau_max - tau_min)),
            tau_min=tau_min,
            tau_max=tau_max,
            eps_converge=system.goal_radius / 4.0,
        )
        fields.update(overrides)
        return cls(**fields)


@dataclass
class SteerResult:
    """Outcome of one steering attempt."""

    trajectory: Trajectory
    terminal_distance: float
    in_collision: bool
    iterations_used: int
    score: float

    @property
    def duration(self) -> float:
        return self.trajectory.total_duration


def trajectory_score(system: System, env: Environment, traj: Trajectory,
                     target, w_c: float = DEFAULT_W_C) -> float:
    """distance(terminal, target) + w_c * (colliding fraction of dt-substeps)."""
    d = float(system.distance(traj.terminal_state, target))
    if traj.num_steps == 0:
        return d
    x = traj.states[0].copy()
    substates = []
    for i in range(traj.num_steps):
        for h in system.substep_durations(float(traj.durations[i])):
            x = system.step(x, traj.controls[i], h)
            substates.append(x.copy())
    free = collision_free_batch(system, env, np.stack(substates))
    return d + w_c * float(np.mean(~free))


def _segment_rollout(system, env, x, controls, durations, count_collisions=True):
    """Advance a population one segment; returns (new states, collision counts, substep counts).

    x (N, d); controls (N, cu); durations (N,).  Samples whose duration is
    shorter than the block length are stepped past their end, but those states
    are never read: terminals are gathered at each sample's own substep count.
    """
    n = len(x)
    dt = system.dt
    steps = np.floor(durations / dt + 1e-9).astype(int)
    rem = durations - steps * dt
    rem[rem < 1e-9] = 0.0
    max_steps = int(steps.max()) if n else 0

    block = np.empty((max_steps + 1, n, system.state_dim))
    block[0] = x
    system.rollout_block(block, controls, max_steps)

    terminal = block[steps, np.arange(n)]
    has_rem = rem > 0.0
    if np.any(has_rem):
        stepped = system.step(terminal.copy(), controls, rem[:, None])
        terminal = np.where(has_rem[:, None], stepped, terminal)

    if not count_collisions:
        return terminal, np.zeros(n), steps + has_rem

    sub = np.arange(1, max_steps + 1)[:, None] <= steps[None, :]   # (max_steps, n)
    if max_steps > 0:
        free = collision_free_batch(
            system, env, block[1:].reshape(-1, system.state_dim))
        hits = (~free).reshape(max_steps, n) & sub
        coll = hits.sum(axis=0).astype(float)
    else:
        coll = np.zeros(n)
    if np.any(has_rem):
        rem_free = collision_free_batch(system, env, terminal)
        coll += (~rem_free) & has_rem
    return terminal, coll, steps + has_rem


def _population_scores(system, env, x0, controls, durations, target, w_c):
    """Scores for a population: controls (N, H, cu), durations (N, H)."""
    n, horizon = durations.shape
    x = np.broadcast_to(x0, (n, system.state_dim)).copy()
    coll = np.zeros(n)
    total = np.zeros(n)
    for h in range(horizon):
        x, c, s = _segment_rollout(system, env, x, controls[:, h], durations[:, h].copy())
        coll += c
        total += s
    dist = system.distance(x, np.broadcast_to(target, x.shape))
    return dist + w_c * (coll / total), x


def _substep_trace(system, x0, controls, durations):
    """Replay one candidate, returning substep states and their segment index."""
    x = np.asarray(x0, dtype=float).copy()
    states, seg_of = [], []
    for h in range(len(durations)):
        for step_len in system.substep_durations(float(durations[h])):
            x = system.step(x, controls[h], step_len)
            states.append(x.copy())
            seg_of.append(h)
    return np.stack(states), np.array(seg_of)


def _truncated_result(system, env, x0, controls, durations, target,
                      iterations_used, w_c) -> SteerResult:
    """Build the returned trajectory: best collision-free prefix substep."""
    substates, seg_of = _substep_trace(system, x0, controls, durations)
    free = collision_free_batch(system, env, substates)
    first_hit = int(np.argmax(~free)) if not free.all() else len(free)
    if first_hit == 0:
        full = Trajectory(_segment_starts(system, x0, controls, durations),
                          np.array(controls), np.array(durations),
                          substates[-1].copy())
        d_full = float(system.distance(full.terminal_state, target))
        return SteerResult(full, d_full, True, iterations_used,
                           d_full + w_c * float(np.mean(~free)))

    prefix_d = system.distance(substates[:first_hit],
                               np.broadcast_to(target, (first_hit, system.state_dim)))
    k = int(np.argmin(prefix_d))               # substep index, 0-based
    last_seg = int(seg_of[k])
    segs_counts = np.bincount(seg_of[:k + 1], minlength=last_seg + 1)
    out_durations = []
    for h in range(last_seg + 1):
        full_steps = len(system.substep_durations(float(durations[h])))
        if segs_counts[h] == full_steps:
            out_durations.append(float(durations[h]))
        else:
            out_durations.append(segs_counts[h] * system.dt)
    out_controls = np.array(controls[:last_seg + 1])
    states = _segment_starts(system, x0, out_controls, np.array(out_durations))
    traj = Trajectory(states, out_controls, np.array(out_durations),
                      substates[k].copy())
    # the kept prefix is collision-free by construction, so its score is the distance
    return SteerResult(traj, float(prefix_d[k]), False, iterations_used,
                       float(prefix_d[k]))


def _segment_starts(system, x0, controls, durations):
    starts = [np.asarray(x0, dtype=float).copy()]
    x = starts[0]
    for h in range(len(durations) - 1):
        x = system.propagate(x, controls[h], float(durations[h]))
        starts.append(x)
    return np.stack(starts)


def _as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def cem_steer(system: System, env: Environment, x_t, target,
              params: CemParams, rng, trace: list | None = None) -> SteerResult:
    """Cross-entropy MPC from x_t toward target.

    Each iteration samples n_samples candidate (control, duration) sequences
    from clipped per-segment Gaussians, scores them, and refits the Gaussians
    to the n_elite best with smoothing alpha.  The best candidate ever seen is
    returned, truncated at its best collision-free prefix substep; ``trace``
    (if given) receives one record per iteration for diagnostics.
    """
    rng = _as_generator(rng)
    x_t = np.asarray(x_t, dtype=float)
    target = np.asarray(target, dtype=float)
    horizon = params.horizon
    c_mean = params.control_mean.copy()
    c_std = params.control_std.copy()
    d_mean = params.duration_mean.copy()
    d_std = params.duration_std.copy()

    best_score = math.inf
    best_controls = None
    best_durations = None
    iterations_used = 0

    for _ in range(params.n_iter):
        iterations_used += 1
        eps_c = rng.standard_normal((params.n_samples, horizon, system.control_dim))
        eps_d = rng.standard_normal((params.n_samples, horizon))
        controls = np.clip(c_mean + c_std * eps_c,
                           system.control_lo, system.control_hi)
        durations = np.clip(d_mean + d_std * eps_d, params.tau_min, params.tau_max)

        scores, _ = _population_scores(system, env, x_t, controls, durations,
                                       target, params.w_c)
        order = np.argsort(scores, kind="stable")
        elites = order[:params.n_elite]
        top = int(order[0])
        if scores[top] < best_score:
            best_score = float(scores[top])
            best_controls = controls[top].copy()
            best_durations = durations[top].copy()

        c_mean = params.alpha * controls[elites].mean(axis=0) + (1 - params.alpha) * c_mean
        c_std = params.alpha * controls[elites].std(axis=0) + (1 - params.alpha) * c_std
        d_mean = params.alpha * durations[elites].mean(axis=0) + (1 - params.alpha) * d_mean
        d_std = params.alpha * durations[elites].std(axis=0) + (1 - params.alpha) * d_std

        if trace is not None:
            trace.append(dict(best_score=best_score,
                              iter_best=float(scores[top]),
                              controls=controls, durations=durations,
                              control_mean=c_mean.copy(),
                              duration_mean=d_mean.copy()))
        if best_score < params.eps_converge:
            break

    return _truncated_result(system, env, x_t, best_controls, best_durations,
                             target, iterations_used, params.w_c)


def _batch_element(args):
    system, env, x, target, params, seed, index = args
    return cem_steer(system, env, x, target, params,
                     np.random.default_rng(seed ^ index))


def batch_cem_steer(system: System, env: Environment, starts, targets,
                    params: CemParams, seed: int, workers: int = 1):
    """Steer a batch of problems; element i uses the rng stream seed ^ i.

    Results are identical for any worker count because every element owns its
    stream; with workers > 1 the elements run in separate processes.
    """
    if len(starts) != len(targets):
        raise ContractViolation("starts and targets must have equal length")
    if len(starts) == 0:
        return []
    jobs = [(system, env, starts[i], targets[i], params, seed, i)
            for i in range(len(starts))]
    if workers <= 1:
        return [_batch_element(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_batch_element, jobs))


def random_shoot(system: System, env: Environment, x_t, target,
                 n_samples: int, rng, params: CemParams | None = None) -> SteerResult:
    """Uniformly sample n_samples single-segment (control, duration) pairs;
    return the lowest-scoring propagation (no prefix truncation)."""
    if n_samples < 1:
        raise ContractViolation("n_samples must be >= 1")
    rng = _as_generator(rng)
    if params is None:
        params = CemParams.for_system(system)
    x_t = np.asarray(x_t, dtype=float)
    target = np.asarray(target, dtype=float)

    controls = rng.uniform(system.control_lo, system.control_hi,
                           size=(n_samples, system.control_dim))
    durations = rng.uniform(params.tau_min, params.tau_max, size=n_samples)
    x = np.broadcast_to(x_t, (n_samples, system.state_dim)).copy()
    terminal, coll, total = _segment_rollout(system, env, x, controls, durations)
    dist = system.distance(terminal, np.broadcast_to(target, terminal.shape))
    scores = dist + params.w_c * (coll / total)
    k = int(np.argmin(scores))

    traj = Trajectory(np.array([x_t]), controls[k:k + 1].copy(),
                      durations[k:k + 1].copy(), terminal[k].copy())
    return SteerResult(traj, float(dist[k]), bool(coll[k] > 0), 1, float(scores[k]))
