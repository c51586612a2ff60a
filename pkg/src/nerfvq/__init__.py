"""Two-stage 3D-aware image generator: a tokenizing NeRF autoencoder and a token transformer."""

__version__ = "0.1.0"
