from .model import (
    GrowthEvent,
    InferenceResult,
    LatentState,
    PathDistribution,
    PruneEvent,
    TreeModel,
    enumerate_leaf_probs,
    init_root_tree,
)
from .networks import ConstantRouter, posterior_merge
from .topology import ROOT_ID, NodeRecord, TreeTopology

__all__ = [
    "ConstantRouter",
    "GrowthEvent",
    "InferenceResult",
    "LatentState",
    "NodeRecord",
    "PathDistribution",
    "PruneEvent",
    "ROOT_ID",
    "TreeModel",
    "TreeTopology",
    "enumerate_leaf_probs",
    "init_root_tree",
    "posterior_merge",
]
