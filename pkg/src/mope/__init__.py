"""Mixture of prefix experts for zero-shot dialogue state tracking, on a toy frozen
transformer written in numpy."""

__version__ = "0.1.0"
