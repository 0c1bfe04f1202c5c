"""Unsupervised cross-modality domain adaptation for VS / cochlea segmentation, at desk scale."""
__version__ = "0.1.0"
