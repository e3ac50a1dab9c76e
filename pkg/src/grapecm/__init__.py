"""Cluster-manager control plane that makes kernel policy decisions for a simulated fleet."""

__version__ = "0.1.0"
