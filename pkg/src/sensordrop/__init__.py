"""Reinforcement-learned sensor selection for edge-to-cloud multi-view classification."""

__version__ = "0.1.0"
