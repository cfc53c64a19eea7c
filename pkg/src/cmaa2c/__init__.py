"""Shielded multi-agent actor-critic for connected vehicles in mixed traffic."""

__version__ = "0.1.0"
