"""Versioned npz checkpoints for the neural models.

One file holds any subset of {encoder, generator, discriminator}: every
weight tensor under "<model>/<index>", plus a JSON metadata blob with each
model's structural config (shapes, normalization bounds, dropout p) and the
caller-supplied training config hash.
"""

import hashlib
import json

import numpy as np

from ..errors import ContractViolation
from .models import Discriminator, Encoder, Generator

CHECKPOINT_VERSION = 1

_MODEL_TYPES = {
    "encoder": Encoder,
    "generator": Generator,
    "discriminator": Discriminator,
}


def config_hash(cfg: dict) -> str:
    """Stable short hash of a JSON-serializable training config."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_models(path, models: dict, meta: dict | None = None):
    """models: name -> model instance, names from {encoder, generator,
    discriminator}."""
    if not models:
        raise ContractViolation("nothing to save")
    arrays = {}
    model_meta = {}
    for name, model in models.items():
        if name not in _MODEL_TYPES:
            raise ContractViolation(f"unknown model name {name!r}")
        for i, p in enumerate(model.params):
            arrays[f"{name}/{i}"] = p
        model_meta[name] = model.config()
    header = {"version": CHECKPOINT_VERSION, "models": model_meta,
              "meta": meta or {}}
    np.savez(path, __header__=np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_models(path):
    """Returns (models dict, meta dict); validates version and shapes."""
    with np.load(path) as data:
        if "__header__" not in data:
            raise ContractViolation(f"{path}: not a model checkpoint")
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ContractViolation(
                f"{path}: unsupported checkpoint version {header.get('version')}")
        models = {}
        for name, cfg in header["models"].items():
            model = _MODEL_TYPES[name].from_config(cfg)
            for i, p in enumerate(model.params):
                key = f"{name}/{i}"
                if key not in data:
                    raise ContractViolation(f"{path}: missing tensor {key}")
                loaded = data[key]
                if loaded.shape != p.shape:
                    raise ContractViolation(
                        f"{path}: tensor {key} has shape {loaded.shape}, "
                        f"expected {p.shape}")
                p[...] = loaded
            models[name] = model
    return models, header["meta"]
