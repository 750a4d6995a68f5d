"""System registry."""

from .base import System, Trajectory, wrap_angle
from .models import Acrobot, Car, Cartpole, DoubleIntegrator, Quadrotor

from ..errors import ContractViolation

_REGISTRY = {
    "acrobot": Acrobot,
    "cartpole": Cartpole,
    "car": Car,
    "quadrotor": Quadrotor,
    "double_integrator": DoubleIntegrator,
}

SYSTEM_NAMES = tuple(sorted(_REGISTRY))


def get_system(name: str, **overrides) -> System:
    """Build a system by name; keyword overrides replace constructor defaults."""
    try:
        cls = _REGISTRY[name]
    except KeyError:
        raise ContractViolation(
            f"unknown system {name!r}; choose from {', '.join(SYSTEM_NAMES)}") from None
    return cls(**overrides)


__all__ = [
    "System", "Trajectory", "wrap_angle", "get_system", "SYSTEM_NAMES",
    "Acrobot", "Cartpole", "Car", "Quadrotor", "DoubleIntegrator",
]
