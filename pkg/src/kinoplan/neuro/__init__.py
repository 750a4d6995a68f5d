"""Neural components: encoder, generator, discriminator, training, policy."""

from .checkpoint import CHECKPOINT_VERSION, config_hash, load_models, save_models
from .models import (
    LATENT_DIM, Discriminator, Encoder, Generator, denormalize_states,
    normalize_states, select_min_cost,
)
from .nets import Adam, Affine, Conv2d, Mlp, dropout_mask, he_init, relu
from .policy import NeuralPolicy
from .train import (
    SampleSet, discriminator_loss, encode_scenes, generator_loss,
    gradient_check, train_discriminator, train_generator,
)

__all__ = [
    "CHECKPOINT_VERSION", "config_hash", "load_models", "save_models",
    "LATENT_DIM", "Discriminator", "Encoder", "Generator",
    "denormalize_states", "normalize_states", "select_min_cost",
    "Adam", "Affine", "Conv2d", "Mlp", "dropout_mask", "he_init", "relu",
    "NeuralPolicy",
    "SampleSet", "discriminator_loss", "encode_scenes", "generator_loss",
    "gradient_check", "train_discriminator", "train_generator",
]
