"""Co-training of graph structure (implicit matrix factorization) and node labels."""

from .errors import UCMFError
from .graph import Graph, NodeData, build_neg_sampler, load_graph, load_node_data
from .nn import ModelParams, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainReport, ablation_variant, fit_probe, grid_search, train

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "ModelParams",
    "NodeData",
    "TrainConfig",
    "TrainReport",
    "UCMFError",
    "ablation_variant",
    "build_neg_sampler",
    "fit_probe",
    "grid_search",
    "load_checkpoint",
    "load_graph",
    "load_node_data",
    "save_checkpoint",
    "train",
]
