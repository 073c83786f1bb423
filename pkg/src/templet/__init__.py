"""Plugin runtime for controllable diffusion on a desk-scale flow-matching backbone."""

__version__ = "0.1.0"
