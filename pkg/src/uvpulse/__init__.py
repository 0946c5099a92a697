"""Orientation-masked UV facial texture video and remote pulse-rate estimation."""

__version__ = "0.1.0"
