"""Offline sequence-model surrogates for multi-task multi-objective search."""

__version__ = "0.1.0"
