"""Desk-scale RL-augmented game-testing pipeline."""

__version__ = "0.1.0"
