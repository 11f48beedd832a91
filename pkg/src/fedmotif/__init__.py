"""Federated subgraph-pattern detection on partitioned directed multigraphs.

A desk-scale, numpy-only simulator: synthetic graph generation with planted
patterns, graph partitioning, a small directional message-passing network,
a layer-wise embedding-exchange protocol between simulated clients, training
regimes (centralized / local / FedAvg / synchronous SGD), and the property
suites that check the protocol's equivalence guarantee.
"""

from fedmotif.graph import TASKS, N_TASKS, Graph, build, load, save

__all__ = ["TASKS", "N_TASKS", "Graph", "build", "load", "save"]
__version__ = "0.1.0"
