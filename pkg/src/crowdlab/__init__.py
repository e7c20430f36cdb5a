"""Crowd-scene analysis: self-supervised crowd counting and clip-level
violence detection, with the data pipelines, metrics and CLI around them."""

__version__ = "0.1.0"

from .errors import CrowdLabError

__all__ = ["CrowdLabError", "__version__"]
