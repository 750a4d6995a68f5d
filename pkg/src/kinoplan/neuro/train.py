"""Training loops and gradient checking for the waypoint networks.

The supervised objective averages per path, not per sample: path i with T_i
transitions contributes 1/(N_p * T_i) per transition, making every
demonstration count equally regardless of length.  SampleSet carries those
weights explicitly so mini-batches stay unbiased estimates of the full loss.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation
from .models import Discriminator, Encoder, Generator, normalize_states
from .nets import Adam


@dataclass
class SampleSet:
    """Flat training arrays tied to scene voxels by integer id.

    targets is (n, state_dim) next-state labels for the generator or (n,)
    cost labels (seconds, or the penalty) for the discriminator.  weights sum
    to 1 over demonstration samples; augmented negatives carry 1/n_negatives
    so both halves of the discriminator loss have equal total mass.
    """

    scene_ids: np.ndarray
    x_t: np.ndarray
    x_goal: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.scene_ids = np.asarray(self.scene_ids, dtype=int)
        self.x_t = np.asarray(self.x_t, dtype=float)
        self.x_goal = np.asarray(self.x_goal, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        n = len(self.scene_ids)
        if self.valid is None:
            self.valid = np.ones(n, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        for name in ("x_t", "x_goal", "targets", "weights", "valid"):
            if len(getattr(self, name)) != n:
                raise ContractViolation(f"{name} length != scene_ids length")
        if n and (self.weights <= 0).any():
            raise ContractViolation("sample weights must be positive")

    def __len__(self):
        return len(self.scene_ids)

    def subset(self, idx):
        return SampleSet(self.scene_ids[idx], self.x_t[idx], self.x_goal[idx],
                         self.targets[idx], self.weights[idx], self.valid[idx])


def _voxel_batch(voxels):
    """List of VoxelGrid (or raw 32^3 arrays) -> (n, 32, 32, 32) float."""
    slabs = [np.asarray(getattr(v, "occupancy", v), dtype=float)
             for v in voxels]
    return np.stack(slabs)


def _check_dataset(samples, voxels):
    if len(samples) == 0:
        raise ContractViolation("empty dataset")
    if samples.scene_ids.min() < 0 or samples.scene_ids.max() >= len(voxels):
        raise ContractViolation("scene id out of range for the voxel list")


def generator_loss(encoder: Encoder, gen: Generator, voxels, samples) -> float:
    """Full-batch deterministic loss: sum of w * ||x_hat - x*||^2 (normalized)."""
    _check_dataset(samples, voxels)
    vox = _voxel_batch(voxels)
    uniq, inv = np.unique(samples.scene_ids, return_inverse=True)
    z = encoder.forward(vox[uniq])[inv]
    xn = normalize_states(samples.x_t, gen.lo, gen.hi)
    gn = normalize_states(samples.x_goal, gen.lo, gen.hi)
    tn = normalize_states(samples.targets, gen.lo, gen.hi)
    err = gen.forward_normalized(z, xn, gn) - tn
    return float(np.sum(samples.weights * np.sum(err * err, axis=1)))


def train_generator(encoder: Encoder, gen: Generator, voxels,
                    samples: SampleSet, epochs: int, rng,
                    lr: float = 1e-3, batch_size: int = 128,
                    dropout: bool = True):
    """Joint encoder+generator training; returns the per-epoch loss curve.

    curve[i] sums the weighted mini-batch losses of epoch i, so each sample
    contributes exactly once per entry and the numbers are on the same scale
    as generator_loss (measured at whatever params its batch saw).
    """
    _check_dataset(samples, voxels)
    vox = _voxel_batch(voxels)
    n = len(samples)
    opt = Adam(encoder.params + gen.params, lr=lr)
    drop_rng = rng if dropout else None
    curve = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo_i in range(0, n, batch_size):
            idx = order[lo_i:lo_i + batch_size]
            scale = n / len(idx)
            sid = samples.scene_ids[idx]
            uniq, inv = np.unique(sid, return_inverse=True)
            z_u = encoder.forward(vox[uniq])
            z = z_u[inv]
            xn = normalize_states(samples.x_t[idx], gen.lo, gen.hi)
            gn = normalize_states(samples.x_goal[idx], gen.lo, gen.hi)
            tn = normalize_states(samples.targets[idx], gen.lo, gen.hi)
            err = gen.forward_normalized(z, xn, gn, drop_rng) - tn
            w = samples.weights[idx]
            epoch_loss += float(np.sum(w * np.sum(err * err, axis=1)))
            dout = 2.0 * (scale * w)[:, None] * err
            dz = gen.backward(dout)[:, :gen.latent_dim]
            dz_u = np.zeros_like(z_u)
            np.add.at(dz_u, inv, dz)
            encoder.backward(dz_u)
            opt.step(encoder.grads + gen.grads)
        curve.append(epoch_loss)
    return np.array(curve)


def discriminator_loss(disc: Discriminator, z_table, samples) -> float:
    """Weighted MSE of cost predictions against labels (raw seconds)."""
    if len(samples) == 0:
        raise ContractViolation("empty dataset")
    z = z_table[samples.scene_ids]
    xn = normalize_states(samples.x_t, disc.lo, disc.hi)
    gn = normalize_states(samples.x_goal, disc.lo, disc.hi)
    err = disc.forward_normalized(z, xn, gn)[:, 0] - samples.targets
    return float(np.sum(samples.weights * err * err))


def encode_scenes(encoder: Encoder, voxels):
    """Deterministic latent table (n_scenes, latent_dim), computed once."""
    return encoder.forward(_voxel_batch(voxels))


def train_discriminator(disc: Discriminator, encoder: Encoder, voxels,
                        samples: SampleSet, epochs: int, rng,
                        lr: float = 1e-3, batch_size: int = 128,
                        dropout: bool = True):
    """Discriminator training against a frozen encoder; returns loss curve
    (same per-epoch batch-sum semantics as train_generator)."""
    _check_dataset(samples, voxels)
    if samples.targets.ndim != 1:
        raise ContractViolation("discriminator targets must be scalars")
    z_table = encode_scenes(encoder, voxels)
    n = len(samples)
    opt = Adam(disc.params, lr=lr)
    drop_rng = rng if dropout else None
    curve = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo_i in range(0, n, batch_size):
            idx = order[lo_i:lo_i + batch_size]
            scale = n / len(idx)
            z = z_table[samples.scene_ids[idx]]
            xn = normalize_states(samples.x_t[idx], disc.lo, disc.hi)
            gn = normalize_states(samples.x_goal[idx], disc.lo, disc.hi)
            err = disc.forward_normalized(z, xn, gn, drop_rng)[:, 0] \
                - samples.targets[idx]
            w = samples.weights[idx]
            epoch_loss += float(np.sum(w * err * err))
            disc.backward((2.0 * scale * w * err)[:, None])
            opt.step(disc.grads)
        curve.append(epoch_loss)
    return np.array(curve)


def gradient_check(loss_fn, params, grads, rng, n_probes: int = 100,
                   h: float = 1e-5) -> float:
    """Max relative error of analytic grads vs central finite differences.

    loss_fn must be deterministic (dropout disabled) and evaluated at the
    current params; grads are the analytic gradients at that same point.
    Error metric: |a - n| / max(1, |a|, |n|).
    """
    if len(params) != len(grads):
        raise ContractViolation("params/grads length mismatch")
    worst = 0.0
    for _ in range(n_probes):
        pi = int(rng.integers(len(params)))
        flat = params[pi].reshape(-1)
        j = int(rng.integers(flat.size))
        saved = flat[j]
        flat[j] = saved + h
        up = loss_fn()
        flat[j] = saved - h
        down = loss_fn()
        flat[j] = saved
        numeric = (up - down) / (2.0 * h)
        analytic = grads[pi].reshape(-1)[j]
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, err)
    return worst
