"""Pixel-input deep Q-learning for a lane-dodging driving game, in plain numpy."""

__version__ = "0.1.0"
