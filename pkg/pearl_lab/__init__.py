"""Permutation-robust in-context learning on synthetic linear tasks."""

__version__ = "0.1.0"
