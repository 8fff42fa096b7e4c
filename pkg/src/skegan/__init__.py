"""Stroke-format vector sketch generation with coupled sequence GANs."""

__version__ = "0.1.0"
