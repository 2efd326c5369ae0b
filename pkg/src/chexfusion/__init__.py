"""Desk-scale multi-view transformer fusion for long-tailed multi-label
classification, with its own differentiable-array substrate."""

__version__ = "0.1.0"
