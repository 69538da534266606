"""Continual test-time adaptation for compact stereo depth networks."""

__version__ = "0.1.0"
