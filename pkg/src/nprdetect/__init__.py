"""Detect up-sampled (generated) images from neighboring pixel relationships."""

from .npr import GridSpec, NprMap, extract_npr, npr_difference, npr_heatmap

__version__ = "0.1.0"

__all__ = ["GridSpec", "NprMap", "extract_npr", "npr_difference", "npr_heatmap", "__version__"]
