"""Planner-facing adapter bundling encoder, generator, and discriminator."""

import numpy as np

from ..errors import ContractViolation
from .checkpoint import load_models
from .models import Discriminator, Encoder, Generator


class NeuralPolicy:
    """The policy protocol the planners consume: encode / generate / cost.

    All stochasticity comes from the rng the planner passes to generate()
    (dropout masks), so planning stays reproducible end to end.
    """

    def __init__(self, system, encoder: Encoder, generator: Generator,
                 discriminator: Discriminator | None = None):
        self.system = system
        self.encoder = encoder
        self.generator = generator
        self.discriminator = discriminator

    def encode(self, voxel):
        return self.encoder.encode_grid(voxel)

    def generate(self, z, states, goal, rng):
        return self.generator.sample(z, states, goal, rng)

    def cost(self, z, states, goal):
        if self.discriminator is None:
            raise ContractViolation(
                "policy has no discriminator; plan with use_discriminator=False")
        return self.discriminator.predict(z, states, goal)

    @classmethod
    def load(cls, system, generator_path, discriminator_path=None):
        """Build from checkpoints: generator file must hold encoder+generator;
        the optional discriminator file contributes only the discriminator."""
        models, _ = load_models(generator_path)
        if "encoder" not in models or "generator" not in models:
            raise ContractViolation(
                f"{generator_path}: needs encoder and generator")
        disc = None
        if discriminator_path is not None:
            dm, _ = load_models(discriminator_path)
            if "discriminator" not in dm:
                raise ContractViolation(
                    f"{discriminator_path}: needs a discriminator")
            disc = dm["discriminator"]
        policy = cls(system, models["encoder"], models["generator"], disc)
        policy._validate_system()
        return policy

    def _validate_system(self):
        if not (np.array_equal(self.generator.lo, self.system.state_lo)
                and np.array_equal(self.generator.hi, self.system.state_hi)):
            raise ContractViolation(
                "generator normalization bounds do not match the system")
