"""Inverse-rendering 3D multi-object tracking with a generative object prior."""

__version__ = "0.1.0"
