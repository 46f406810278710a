"""Federated-learning simulator with a label-distribution inference attack."""

__version__ = "0.1.0"
