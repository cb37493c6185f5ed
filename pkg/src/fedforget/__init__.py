"""Simulate catastrophic forgetting in federated human activity recognition."""

__version__ = "0.1.0"
