"""Dynamical system base: bounded state/control spaces, Euler propagation, metric.

States and controls are plain float64 numpy arrays.  All operations accept either
a single state ``(d,)`` or a batch ``(n, d)`` and are written componentwise so that
the batched arithmetic is bit-identical to the scalar arithmetic row by row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Map angles into [-pi, pi)."""
    return np.remainder(theta + math.pi, TWO_PI) - math.pi


def _split_duration(tau: float, dt: float):
    """Number of full Euler steps and the trailing partial step for a duration."""
    if tau <= 0:
        raise ContractViolation(f"duration must be positive, got {tau}")
    ratio = tau / dt
    n = int(math.floor(ratio + 1e-9))
    rem = tau - n * dt
    if rem < 1e-9:
        rem = 0.0
    return n, rem


@dataclass
class Trajectory:
    """A piecewise-constant control trajectory.

    ``states[i]`` is the state at which ``controls[i]`` is applied for
    ``durations[i]`` seconds; ``terminal_state`` is the state after the last
    segment.  A zero-segment trajectory is just a point.
    """

    states: np.ndarray      # (m, d)
    controls: np.ndarray    # (m, cu)
    durations: np.ndarray   # (m,)
    terminal_state: np.ndarray  # (d,)

    @property
    def num_steps(self) -> int:
        return len(self.durations)

    @property
    def total_duration(self) -> float:
        return float(np.sum(self.durations))

    @classmethod
    def point(cls, state, state_dim=None, control_dim=0):
        state = np.asarray(state, dtype=float)
        d = state.shape[0] if state_dim is None else state_dim
        return cls(
            states=np.zeros((0, d)),
            controls=np.zeros((0, control_dim)),
            durations=np.zeros(0),
            terminal_state=state.copy(),
        )

    def replay(self, system: "System") -> np.ndarray:
        """Re-propagate every segment from the first state; returns the terminal state."""
        if self.num_steps == 0:
            return self.terminal_state.copy()
        x = self.states[0].copy()
        for i in range(self.num_steps):
            x = system.propagate(x, self.controls[i], float(self.durations[i]))
        return x


class System:
    """A controlled dynamical system with box bounds and a weighted metric.

    Subclasses implement :meth:`derivative` with componentwise batched math.
    ``angular_mask`` marks wrapped components, ``velocity_mask`` marks components
    clamped to their bounds during propagation (positions are not clamped; leaving
    the workspace is an environment-level validity question, not an integration
    failure).  ``quat_block`` is the start index of a unit-quaternion sub-vector
    (w, x, y, z) or None.
    """

    name: str = "system"

    def __init__(self, state_lo, state_hi, control_lo, control_hi,
                 angular_mask, velocity_mask, dt, distance_weights,
                 goal_radius, quat_block=None, params=None):
        self.state_lo = np.asarray(state_lo, dtype=float)
        self.state_hi = np.asarray(state_hi, dtype=float)
        self.control_lo = np.asarray(control_lo, dtype=float)
        self.control_hi = np.asarray(control_hi, dtype=float)
        self.angular_mask = np.asarray(angular_mask, dtype=bool)
        self.velocity_mask = np.asarray(velocity_mask, dtype=bool)
        self.dt = float(dt)
        self.distance_weights = np.asarray(distance_weights, dtype=float)
        self.goal_radius = float(goal_radius)
        self.quat_block = quat_block
        self.params = dict(params or {})

        self.state_dim = len(self.state_lo)
        self.control_dim = len(self.control_lo)
        # propagation hot path: precomputed flags and full-width clip bounds
        self._has_angular = bool(self.angular_mask.any())
        self._has_velocity = bool(self.velocity_mask.any())
        self._clip_lo = np.where(self.velocity_mask, self.state_lo, -np.inf)
        self._clip_hi = np.where(self.velocity_mask, self.state_hi, np.inf)
        if not (np.all(np.isfinite(self.state_lo)) and np.all(self.state_lo < self.state_hi)):
            raise ContractViolation(f"{self.name}: invalid state bounds")
        if not np.all(self.control_lo < self.control_hi):
            raise ContractViolation(f"{self.name}: invalid control bounds")
        if len(self.distance_weights) != self.state_dim:
            raise ContractViolation(f"{self.name}: distance_weights length mismatch")
        if self.dt <= 0:
            raise ContractViolation(f"{self.name}: dt must be positive")

    # -- dynamics -----------------------------------------------------------

    def derivative(self, x, u, out=None):
        raise NotImplementedError

    def _check_dims(self, x, u):
        if x.shape[-1] != self.state_dim:
            raise ContractViolation(
                f"{self.name}: state has dim {x.shape[-1]}, expected {self.state_dim}")
        if u.shape[-1] != self.control_dim:
            raise ContractViolation(
                f"{self.name}: control has dim {u.shape[-1]}, expected {self.control_dim}")

    def _normalize_inplace(self, x):
        """Wrap angles, clamp velocities, renormalize quaternion; mutates x."""
        if self._has_angular:
            wrapped = np.remainder(x + math.pi, TWO_PI) - math.pi
            np.copyto(x, wrapped, where=self.angular_mask)
        if self._has_velocity:
            np.maximum(x, self._clip_lo, out=x)
            np.minimum(x, self._clip_hi, out=x)
        if self.quat_block is not None:
            q0 = self.quat_block
            qw = x[..., q0 + 0]
            qx = x[..., q0 + 1]
            qy = x[..., q0 + 2]
            qz = x[..., q0 + 3]
            norm = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
            x[..., q0 + 0] = qw / norm
            x[..., q0 + 1] = qx / norm
            x[..., q0 + 2] = qy / norm
            x[..., q0 + 3] = qz / norm
        return x

    def normalize_state(self, x):
        """Copying variant of the post-integration cleanup."""
        return self._normalize_inplace(np.array(x, dtype=float))

    def step(self, x, u, h):
        """One explicit Euler step of length h followed by state cleanup."""
        xn = x + h * self.derivative(x, u)
        return self._normalize_inplace(xn)

    def rollout_block(self, block, u, n_steps):
        """Fill block[1..n_steps] with successive dt steps from block[0].

        block: preallocated (n_steps+1, n, state_dim) with block[0] set;
        u: (n, control_dim).  Returns block[n_steps].  Bitwise identical to
        repeated step() calls; written to minimize per-step allocations.
        """
        dt = self.dt
        cur = block[0]
        dbuf = np.empty_like(cur)
        for j in range(n_steps):
            nxt = block[j + 1]
            self.derivative(cur, u, out=dbuf)
            np.multiply(dbuf, dt, out=dbuf)
            np.add(cur, dbuf, out=nxt)
            self._normalize_inplace(nxt)
            cur = nxt
        return cur

    def propagate(self, x, u, tau: float):
        """Integrate for tau seconds: full dt steps plus one partial step.

        Deterministic and batch-safe; the same (x, u, tau) always yields the
        bitwise-identical result.
        """
        x = np.array(x, dtype=float)
        u = np.asarray(u, dtype=float)
        self._check_dims(x, u)
        n, rem = _split_duration(tau, self.dt)
        for _ in range(n):
            x = self.step(x, u, self.dt)
        if rem > 0.0:
            x = self.step(x, u, rem)
        return x

    def substep_durations(self, tau: float):
        """The dt-resolution substep lengths propagate() uses for a duration."""
        n, rem = _split_duration(tau, self.dt)
        out = [self.dt] * n
        if rem > 0.0:
            out.append(rem)
        return out

    # -- metric -------------------------------------------------------------

    def distance(self, x1, x2):
        """Weighted Euclidean metric with angle wrapping (and quaternion geodesic)."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        diff = x1 - x2
        if self.angular_mask.any():
            diff = diff.copy()
            diff[..., self.angular_mask] = wrap_angle(diff[..., self.angular_mask])
        w = self.distance_weights
        if self.quat_block is None:
            return np.sqrt(np.sum((w * diff) ** 2, axis=-1))
        q0 = self.quat_block
        keep = np.ones(self.state_dim, dtype=bool)
        keep[q0:q0 + 4] = False
        lin = np.sum((w[keep] * diff[..., keep]) ** 2, axis=-1)
        # geodesic angle 2*arccos(|<q1,q2>|), computed as 4*asin(||q1 -/+ q2||/2)
        # so that identical quaternions give exactly zero
        qa = x1[..., q0:q0 + 4]
        qb = x2[..., q0:q0 + 4]
        dm = np.sum((qa - qb) ** 2, axis=-1)
        dp = np.sum((qa + qb) ** 2, axis=-1)
        half = 0.5 * np.sqrt(np.minimum(dm, dp))
        ang = 4.0 * np.arcsin(np.clip(half, 0.0, 1.0))
        return np.sqrt(lin + (w[q0] * ang) ** 2)

    # -- sampling -----------------------------------------------------------

    def sample_state(self, rng: np.random.Generator):
        x = rng.uniform(self.state_lo, self.state_hi)
        if self.quat_block is not None:
            q0 = self.quat_block
            q = rng.normal(size=4)
            x[q0:q0 + 4] = q / np.linalg.norm(q)
        return x

    def sample_control(self, rng: np.random.Generator):
        return rng.uniform(self.control_lo, self.control_hi)

    def contains(self, x):
        """Whether every component of x is within bounds (angles wrapped)."""
        x = np.asarray(x, dtype=float)
        ok = np.all((x >= self.state_lo - 1e-9) & (x <= self.state_hi + 1e-9), axis=-1)
        return ok

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, dt={self.dt})"
