"""Personalized federated learning with a graph-attention aggregator, simulated in one process."""

__version__ = "0.1.0"
