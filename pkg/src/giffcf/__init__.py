"""Graph-signal diffusion for collaborative filtering on implicit feedback."""

from giffcf.dataio import InteractionDataset, load_interactions, split_dataset
from giffcf.diffusion import DiffusionSchedule
from giffcf.graph import GraphConfig, ItemGraph, build_item_graph

__version__ = "0.1.0"

__all__ = [
    "DiffusionSchedule",
    "GraphConfig",
    "InteractionDataset",
    "ItemGraph",
    "build_item_graph",
    "load_interactions",
    "split_dataset",
]
