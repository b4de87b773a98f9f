"""Dual-branch attribute/spatial grounding on synthetic 3D scenes."""

__version__ = "0.1.0"
