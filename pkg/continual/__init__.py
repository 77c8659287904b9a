"""Replay-buffer sample selection for continual semantic segmentation."""

__version__ = "0.1.0"
