"""Diffusion refinement of coarse face-animation frames under appearance and motion conditions."""

__version__ = "0.1.0"
