"""Simulator of federated Mixture-of-Experts training with load-balanced expert assignment."""

__version__ = "0.1.0"
