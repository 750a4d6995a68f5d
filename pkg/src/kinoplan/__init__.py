"""kinoplan: kinodynamic motion planning with CEM-MPC steering and learned sampling."""

from .systems import System, Trajectory, get_system, SYSTEM_NAMES

__version__ = "0.1.0"

__all__ = ["System", "Trajectory", "get_system", "SYSTEM_NAMES", "__version__"]
