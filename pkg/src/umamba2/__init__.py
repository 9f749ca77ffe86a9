"""U-Mamba2 multi-anatomy 3D segmentation at desk scale."""

__version__ = "0.1.0"
