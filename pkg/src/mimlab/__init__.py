"""Mutual Information Machine: objectives, training and evaluation."""

__version__ = "0.1.0"
