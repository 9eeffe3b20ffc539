"""Continual-learning object detection with a frozen context branch and bridge-fed specialists."""

__version__ = "0.1.0"
