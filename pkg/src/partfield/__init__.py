"""Part-aware semantic field diffusion policy."""

__version__ = "0.1.0"
