"""Scribble-supervised segmentation training at desk scale."""

__version__ = "0.1.0"

from .util import UNKNOWN  # noqa: F401
