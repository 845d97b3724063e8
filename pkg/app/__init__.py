"""Weak greedy reduced bases over random training sets."""

__version__ = "0.1.0"
