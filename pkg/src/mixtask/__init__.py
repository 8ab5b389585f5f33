"""Self-supervised task inference with a Gaussian-mixture recurrent VAE and a belief-conditioned SAC policy."""

__version__ = "0.1.0"
