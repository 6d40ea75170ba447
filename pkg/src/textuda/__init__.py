"""Text-guided cross-modality segmentation with unsupervised domain adaptation."""

__version__ = "0.1.0"
