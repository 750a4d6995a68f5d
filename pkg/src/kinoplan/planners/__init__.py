"""Tree search planners: learned-waypoint planners, SST, staged exploration."""

from .core import (
    PlannerConfig,
    PlanResult,
    SstConfig,
    check_sst_invariants,
    mpnet_path_plan,
    mpnet_tree_plan,
    sst_plan,
    staged_plan,
)
from .tree import (
    MetricIndex,
    SearchTree,
    WitnessSet,
    extract_path,
    reached,
    replay_node_state,
)

__all__ = [
    "MetricIndex",
    "SearchTree",
    "WitnessSet",
    "PlannerConfig",
    "SstConfig",
    "PlanResult",
    "reached",
    "extract_path",
    "replay_node_state",
    "check_sst_invariants",
    "sst_plan",
    "mpnet_path_plan",
    "mpnet_tree_plan",
    "staged_plan",
]
