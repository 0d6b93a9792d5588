"""Superpixel road segmentation with CNN labeling and CRF refinement."""

__version__ = "0.1.0"
