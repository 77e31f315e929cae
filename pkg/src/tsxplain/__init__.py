"""Hybrid ResNet/Transformer time-series classifier with fused, explainable heatmaps."""

__version__ = "0.1.0"
