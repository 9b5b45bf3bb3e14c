"""Federated-learning simulation lab with per-category local importance sampling."""

__version__ = "0.1.0"
