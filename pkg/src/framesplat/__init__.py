"""Feed-forward joint prediction of pixel-aligned 3D Gaussian splats and
camera poses from short unposed frame sequences, with a procedural synthetic
scene pipeline for training and evaluation."""

__version__ = "0.1.0"
