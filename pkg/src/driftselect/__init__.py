"""Drift-aware data selection for continual updates of a toy HSTU recommender."""

__version__ = "0.1.0"
