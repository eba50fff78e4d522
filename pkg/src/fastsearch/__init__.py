"""Differentiable multi-resolution architecture search with fine-grained latency regularization."""

__version__ = "0.1.0"
