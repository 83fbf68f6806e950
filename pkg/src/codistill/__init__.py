"""Personalized federated learning with spectral co-distillation and a wait-free clock."""

__version__ = "0.1.0"
