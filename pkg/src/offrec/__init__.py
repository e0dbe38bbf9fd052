"""Offline reinforcement-learning recommenders for session-based logs."""

__version__ = "0.1.0"
