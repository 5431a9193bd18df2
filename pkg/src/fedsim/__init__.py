"""Deterministic federated ASR training simulator and corpus heterogeneity toolkit."""

__version__ = "0.1.0"
