"""Graph-based OOD detection on long-tailed data: synthetic benchmark, backbone, k-NN graphs, GCN and metrics."""

__version__ = "0.1.0"
