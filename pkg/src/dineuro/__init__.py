"""Tubular transfer of 2D patch-embedding weights into a 3D ViT for neuron segmentation."""

__version__ = "0.1.0"
