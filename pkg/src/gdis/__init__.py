"""Network causal effect decomposition with an attention GNN and HSIC balancing."""

from .exposure import ExposureSummary, compute_exposures
from .graph import Network, Partition, load_network, partition_graph, save_network

__version__ = "0.1.0"

__all__ = [
    "ExposureSummary", "Network", "Partition", "compute_exposures", "load_network",
    "partition_graph", "save_network",
]
