"""Image-conditioned GRU caption generators: inject vs merge architectures."""

__version__ = "0.1.0"
