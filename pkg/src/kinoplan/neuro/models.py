"""Encoder, waypoint generator, and time-to-reach discriminator.

The encoder turns the 32^3 occupancy grid into a latent vector by treating
z-slices as channels of a 2D convolution stack (a 3D-conv stand-in at a
fraction of the cost).  Generator and discriminator are MLPs over
[latent, state, goal] in the [-1, 1]-normalized state space; the generator's
dropout stays on at sampling time, which is what makes it a sampler rather
than a regressor.
"""

import numpy as np

from ..errors import ContractViolation
from ..systems.base import wrap_angle
from .nets import Affine, Conv2d, Mlp, relu, relu_backward

LATENT_DIM = 64
VOXEL_SIDE = 32


def normalize_states(x, lo, hi):
    """Map in-bounds states to [-1, 1] componentwise."""
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def denormalize_states(u, lo, hi):
    return lo + (u + 1.0) * 0.5 * (hi - lo)


class Encoder:
    """32^3 occupancy -> latent vector; deterministic (no dropout)."""

    def __init__(self, rng, latent_dim: int = LATENT_DIM, channels=(16, 8)):
        if len(channels) != 2:
            raise ContractViolation("encoder takes exactly two conv layers")
        self.latent_dim = int(latent_dim)
        self.channels = tuple(int(c) for c in channels)
        self.conv1 = Conv2d(rng, VOXEL_SIDE, self.channels[0])
        self.conv2 = Conv2d(rng, self.channels[0], self.channels[1])
        side = VOXEL_SIDE // 4          # two stride-2 layers
        self.fc = Affine(rng, self.channels[1] * side * side, self.latent_dim)
        self._h1 = None
        self._h2 = None

    def forward(self, vox):
        """vox: (n, 32, 32, 32) occupancy (any float/int dtype) -> (n, latent)."""
        vox = np.asarray(vox, dtype=float)
        if vox.ndim != 4 or vox.shape[1:] != (VOXEL_SIDE,) * 3:
            raise ContractViolation(
                f"expected (n, 32, 32, 32) voxels, got {vox.shape}")
        x = vox.transpose(0, 3, 1, 2)   # z-slices as channels
        self._h1 = relu(self.conv1.forward(x))
        self._h2 = relu(self.conv2.forward(self._h1))
        n = vox.shape[0]
        return self.fc.forward(self._h2.reshape(n, -1))

    def backward(self, dz):
        dflat = self.fc.backward(dz)
        dh2 = relu_backward(dflat.reshape(self._h2.shape), self._h2)
        dh1 = relu_backward(self.conv2.backward(dh2), self._h1)
        self.conv1.backward(dh1)

    def encode_grid(self, grid):
        """Single VoxelGrid -> (latent,) vector."""
        return self.forward(grid.occupancy[None].astype(float))[0]

    @property
    def params(self):
        return self.conv1.params + self.conv2.params + self.fc.params

    @property
    def grads(self):
        return self.conv1.grads + self.conv2.grads + self.fc.grads

    def config(self):
        return {"latent_dim": self.latent_dim, "channels": list(self.channels)}

    @classmethod
    def from_config(cls, cfg):
        return cls(np.random.default_rng(0), cfg["latent_dim"],
                   tuple(cfg["channels"]))


class Generator:
    """Stochastic waypoint proposer: dropout masks are the noise source."""

    def __init__(self, rng, lo, hi, angular_mask, latent_dim: int = LATENT_DIM,
                 hidden=(512, 512, 512), p_drop: float = 0.2):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.angular_mask = np.asarray(angular_mask, dtype=bool)
        self.state_dim = len(self.lo)
        if not (len(self.hi) == len(self.angular_mask) == self.state_dim):
            raise ContractViolation("bounds/mask lengths disagree")
        self.latent_dim = int(latent_dim)
        self.mlp = Mlp(rng, self.latent_dim + 2 * self.state_dim,
                       self.state_dim, hidden, p_drop)

    @classmethod
    def for_system(cls, rng, system, **kwargs):
        return cls(rng, system.state_lo, system.state_hi,
                   system.angular_mask, **kwargs)

    def forward_normalized(self, z_rows, xt_n, goal_n, rng=None):
        """Training-space forward; inputs and output are normalized states."""
        return self.mlp.forward(
            np.concatenate([z_rows, xt_n, goal_n], axis=1), rng)

    def backward(self, dout):
        """Returns the input gradient; caller slices off the latent block."""
        return self.mlp.backward(dout)

    def sample(self, z, states, goal, rng):
        """Propose one waypoint per row of states.

        rng draws the dropout masks (stochastic mode); rng=None gives the
        deterministic mean network.  Output is de-normalized, clamped to
        bounds, and angle-wrapped.
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        k = states.shape[0]
        z_rows = np.broadcast_to(np.asarray(z, dtype=float),
                                 (k, self.latent_dim))
        xn = normalize_states(states, self.lo, self.hi)
        gn = np.broadcast_to(
            normalize_states(np.asarray(goal, dtype=float), self.lo, self.hi),
            (k, self.state_dim))
        raw = self.forward_normalized(z_rows, xn, gn, rng)
        out = denormalize_states(raw, self.lo, self.hi)
        np.clip(out, self.lo, self.hi, out=out)
        if self.angular_mask.any():
            out[:, self.angular_mask] = wrap_angle(out[:, self.angular_mask])
        return out

    @property
    def params(self):
        return self.mlp.params

    @property
    def grads(self):
        return self.mlp.grads

    def config(self):
        return {
            "lo": self.lo.tolist(), "hi": self.hi.tolist(),
            "angular_mask": self.angular_mask.tolist(),
            "latent_dim": self.latent_dim,
            "hidden": [l.W.shape[1] for l in self.mlp.layers[:-1]],
            "p_drop": self.mlp.p_drop,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(np.random.default_rng(0), cfg["lo"], cfg["hi"],
                   cfg["angular_mask"], cfg["latent_dim"],
                   tuple(cfg["hidden"]), cfg["p_drop"])


class Discriminator:
    """Predicts seconds-to-goal; trained with dropout, deterministic to call."""

    def __init__(self, rng, lo, hi, latent_dim: int = LATENT_DIM,
                 hidden=(512, 512, 512), p_drop: float = 0.2):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.state_dim = len(self.lo)
        self.latent_dim = int(latent_dim)
        self.mlp = Mlp(rng, self.latent_dim + 2 * self.state_dim, 1,
                       hidden, p_drop)

    @classmethod
    def for_system(cls, rng, system, **kwargs):
        return cls(rng, system.state_lo, system.state_hi, **kwargs)

    def forward_normalized(self, z_rows, xt_n, goal_n, rng=None):
        return self.mlp.forward(
            np.concatenate([z_rows, xt_n, goal_n], axis=1), rng)

    def backward(self, dout):
        return self.mlp.backward(dout)

    def predict(self, z, states, goal):
        """Deterministic cost estimates, shape (k,)."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        k = states.shape[0]
        z_rows = np.broadcast_to(np.asarray(z, dtype=float),
                                 (k, self.latent_dim))
        xn = normalize_states(states, self.lo, self.hi)
        gn = np.broadcast_to(
            normalize_states(np.asarray(goal, dtype=float), self.lo, self.hi),
            (k, self.state_dim))
        return self.forward_normalized(z_rows, xn, gn)[:, 0]

    @property
    def params(self):
        return self.mlp.params

    @property
    def grads(self):
        return self.mlp.grads

    def config(self):
        return {
            "lo": self.lo.tolist(), "hi": self.hi.tolist(),
            "latent_dim": self.latent_dim,
            "hidden": [l.W.shape[1] for l in self.mlp.layers[:-1]],
            "p_drop": self.mlp.p_drop,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(np.random.default_rng(0), cfg["lo"], cfg["hi"],
                   cfg["latent_dim"], tuple(cfg["hidden"]), cfg["p_drop"])


def select_min_cost(z, candidates, x_goal, disc: Discriminator):
    """The candidate with the lowest predicted cost; ties -> lowest index."""
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.shape[0] == 0:
        raise ContractViolation("select_min_cost needs at least one candidate")
    costs = disc.predict(z, candidates, x_goal)
    return candidates[int(np.argmin(costs))]
