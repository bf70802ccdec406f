"""Training and verification tools for flux-matched generative vector fields."""

__version__ = "0.1.0"
