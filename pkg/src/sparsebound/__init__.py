"""Sparse layered-DAG networks, their norm-based generalization bounds, and checks."""

__version__ = "0.1.0"
