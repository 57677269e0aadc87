"""Capsule networks with routing-by-agreement on structurally pruned conv backbones."""

__version__ = "0.1.0"
