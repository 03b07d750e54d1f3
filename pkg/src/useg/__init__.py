"""Text-conditioned Mamba-style U-Net segmentation at desk scale."""

__version__ = "0.1.0"
