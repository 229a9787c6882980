"""Segmentation-guided weighted knowledge distillation for visual place recognition."""

__version__ = "0.1.0"
