"""Cascaded point cloud completion with feature-level knowledge distillation."""

__version__ = "0.1.0"
